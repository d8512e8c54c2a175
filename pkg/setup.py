"""
Setup script for Wild OOD
"""

from setuptools import setup, find_packages

setup(
    name="wild-ood",
    version="1.0.0",
    description="Out-of-distribution detection trained from labeled ID data and unlabeled wild data",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires='>=3.8',
    install_requires=[
        'pandas>=2.0.3',
        'numpy>=1.24.3',
        'scipy>=1.10.1',
        'colorama>=0.4.6',
    ],
    extras_require={
        'test': [
            'pytest>=7.4.0',
            'pytest-cov>=4.1.0',
        ],
    },
    entry_points={
        'console_scripts': [
            'wild-ood=wild_ood.cli:main',
        ],
    },
)
