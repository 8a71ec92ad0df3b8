"""
UI modules for pipeforge
"""
