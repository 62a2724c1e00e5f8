"""Setup configuration for the music attribute editor."""

from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = f.read().splitlines()

setup(
    name="music-attribute-editor",
    version="1.0.0",
    description="Structure-preserving music attribute editing on a toy latent diffusion model",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["main"],
    install_requires=requirements,
    extras_require={
        "test": ["pytest==7.4.3"],
    },
    python_requires=">=3.9",
    entry_points={
        "console_scripts": [
            "music-editor=main:main",
        ],
    },
)
