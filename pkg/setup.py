from setuptools import setup, find_packages

setup(
    name="varsel-engine",
    version="0.3.0",
    description="贝叶斯 ReLU 网络变量选择：HMC 后验、去偏梯度重要性、同时可信带",
    author="Todd & Master",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["varsel"],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.9",
        "pandas>=1.4",
        "pyyaml>=6.0",
        'tomli>=2.0; python_version < "3.11"',
    ],
    extras_require={
        "test": ["pytest>=7"],
    },
    entry_points={
        "console_scripts": ["varsel=varsel_engine.cli:main"],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
)
