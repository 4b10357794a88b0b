# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""deepatlas-desk setup file."""
from shutil import copyfile
from os.path import isfile
from setuptools import setup  # type: ignore
from setuptools.command.build_py import build_py  # type: ignore

PACKAGE_DIR = 'deepatlas'


def copy_license() -> None:
    """Copy license file to package"""
    if isfile('LICENSE.txt'):
        copyfile('LICENSE.txt', f'{PACKAGE_DIR}/LICENSE.txt')


with open('requirements.txt', mode='r', encoding='utf-8') as f:
    requirements = f.read().splitlines()


class CustomBuildCommand(build_py):
    """
    Customized build command.
    """

    def run(self) -> None:
        """
        Ships license with the package.
        """
        copy_license()
        build_py.run(self)


setup(
    install_requires=requirements,
    setup_requires=['click'],
    cmdclass={
        'build_py': CustomBuildCommand
    }
)
