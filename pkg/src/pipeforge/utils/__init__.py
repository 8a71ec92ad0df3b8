"""
Utility modules for pipeforge
"""
