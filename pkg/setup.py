from setuptools import find_packages, setup

setup(
    name="dfa-recommender",
    packages=find_packages(exclude=["tests"]),
)
