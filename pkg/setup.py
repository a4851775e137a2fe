#!/usr/bin/env python3
"""
Setup script for PyAVSep
"""

from setuptools import setup, find_packages
import os

# Read the README file
def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return "PyAVSep - audio-visual sound source detection and separation"

setup(
    name="pyavsep",
    version="0.1.0",
    author="Zoe Chen",
    author_email="zoechen0717@gmail.com",
    description="Weakly-supervised audio-visual sound source detection and separation",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["pyavsep", "pyavsep.*"]),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Multimedia :: Sound/Audio :: Analysis",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.6",
        "soundfile>=0.10",
        "Pillow>=8.0",
        "tqdm>=4.50",
    ],
    extras_require={
        "dev": ["pytest>=6.0"],
    },
    entry_points={
        "console_scripts": [
            "pyavsep=pyavsep.__main__:main",
        ],
    },
    keywords="audio, source-separation, audio-visual, weak-supervision, bss-eval",
)
