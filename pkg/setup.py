from pathlib import Path

from setuptools import find_packages, setup

setup(
    name="aeml",
    version=Path.cwd().joinpath("aeml/VERSION").read_text(),
    long_description=Path.cwd().joinpath("README.md").read_text(),
    description="Trajectory storage strategies for adjoint full-waveform inversion: checkpoints, autoencoder and quantizer compression.",
    long_description_content_type="text/markdown",
    license="MIT",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.9",
        "Topic :: Scientific/Engineering :: Physics",
        "Operating System :: POSIX :: Linux",
    ],
    py_modules=["fwi_bench"],
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "loguru==0.5.3",
        "behave==1.2.6",
        "plumbum==1.7.1",
        "click==7.1",
        "PyYAML>=5.4.1",
        "numpy>=1.21",
        "scipy>=1.12",
        "torch>=1.12",
        "matplotlib>=3.5",
    ],
    extras_require={"test": ["pytest>=6.2"]},
    entry_points="""
        [console_scripts]
        aeml=fwi_bench:cli
    """,
    include_package_data=True,
    python_requires=">=3.9",
)
