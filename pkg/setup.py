import os

from setuptools import find_packages
from setuptools import setup

# Read version from VERSION file
with open(os.path.join(os.path.dirname(os.path.abspath(__file__)), "VERSION")) as f:
    version_str = f.read().strip()
    # Get only the first part (without develop suffix)
    version = version_str.rsplit("-", 1)[0]

current_directory = os.path.dirname(os.path.abspath(__file__))
try:
    with open(os.path.join(current_directory, "README.md"), encoding="utf-8") as f:
        long_description = f.read()
except Exception:
    long_description = ""

setup(
    name="flow_pretrain",
    packages=find_packages(".", exclude=["tests", "tests.*"]),
    py_modules=["flow_pretrain"],
    package_data={"": ["../VERSION", "../config/*.sample", "../config/presets/*.yml"]},
    include_package_data=True,
    version=version,
    license="MIT",
    description="Self-supervised scene-flow pre-training of a point-cloud backbone for low-data 3D object detection.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    entry_points={"console_scripts": ["flow-pretrain=flow_pretrain:cli"]},
)
