from setuptools import setup, find_packages

version = {}
with open('kdnnp/version.py') as fh:
    exec(fh.read(), version)

setup(
    name='kdnnp',
    version=version['version'],
    description="Knowledge distillation for neural-network interatomic "
                "potentials",
    packages=find_packages(exclude=['tests']),
    classifiers=[
        "License :: OSI Approved :: ISC License (ISCL)",
        "Programming Language :: Python",
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Chemistry",
        "Topic :: Scientific/Engineering :: Physics",
        "Programming Language :: Python :: 3",
    ],
    keywords='machine learning interatomic potentials molecular dynamics',
    license='ISC',
    python_requires='>=3.6',
    install_requires=[
        'anyconfig',
        'boltons',
        'colorama',
        'docopt',
        'joblib>=1.3',
        'jsonschema',
        'numpy>=1.17',
        'pandas',
        'progressbar2',
        'pyyaml',
        'scikit-learn',
        'scipy',
        'toml',
    ],
    extras_require={
        'docs': ['numpydoc'],
        'tests': ['pytest']
    }
)
