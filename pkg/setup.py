# setup.py

from setuptools import setup

setup(
    name='roughcalc',
    version='0.1.0',
    packages=['src'],
    description='Discrete operator calculus (Malliavin derivative, divergence, Clark-Ocone) '
                'for rough fractional Brownian motion, with seed-deterministic experiments.',
    long_description=open('README.md', encoding='utf-8').read(),
    long_description_content_type='text/markdown',
    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'scikit-learn',
        'joblib',
        'matplotlib',
        'seaborn',
        'plotly',
    ],
    entry_points={
        'console_scripts': ['roughcalc=src.cli:main'],
    },
    python_requires='>=3.10',
)
