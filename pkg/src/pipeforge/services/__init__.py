"""
Service modules for pipeforge
"""
