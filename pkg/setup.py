from setuptools import setup, find_packages

setup(name="convsynth",
      version="1.0.0",
      packages=find_packages(exclude=["tests"]),
      package_data={"convsynth": ["config.json"]},
      python_requires=">=3.9",
      install_requires=["numpy>=1.21", "pandas>=1.3", "scipy>=1.7", "torch>=1.13",
                        "matplotlib>=3.5", "click>=8.0"],
      entry_points={"console_scripts": ["convsynth=convsynth.cli:cli"]})
