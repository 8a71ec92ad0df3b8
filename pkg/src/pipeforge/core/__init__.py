"""
Core modules for pipeforge
"""
