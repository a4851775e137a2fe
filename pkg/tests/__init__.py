"""PyAVSep test suite"""
