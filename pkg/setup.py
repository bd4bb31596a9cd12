from setuptools import setup, find_packages


def readme():
    with open('Readme.rst') as f:
        return f.read()


setup(
    name='resmat',
    version='0.1.0',
    description="Residual matrix transformers and a baseline transformer, "
                "with resource accounting and variance propagation tools",
    long_description=readme(),
    license='MIT',
    keywords=['transformer', 'outer product memory', 'language model'],
    include_package_data=True,
    packages=find_packages(exclude=["docs", "examples", "tests"]),
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.20',
        'rich>=12.0',
        'torch>=1.13',
    ],
    entry_points='''
        [console_scripts]
        resmat=resmat.cli:cli
    ''',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
)
