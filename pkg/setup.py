# -*- coding: UTF-8 -*-
"""Setup script"""

from setuptools import setup

setup(
    author='Jef Oliver',
    author_email='jef@eljef.me',
    description='Modality-aware mixture-of-experts routing for a toy bimodal transformer',
    entry_points={
        'console_scripts': [
            'mamoe = eljef.mamoe.cli:main',
        ],
    },
    install_requires=['colorlog', 'numpy', 'PyYAML'],
    license='0BSD',
    name='eljef-mamoe',
    packages=['eljef.mamoe'],
    python_requires='>=3.8',
    url='https://eljef.dev/python/eljef_mamoe',
    version='2026.10.1',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Operating System :: POSIX :: Linux',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ]
)
