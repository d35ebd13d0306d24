from setuptools import setup, find_packages

setup(
    name='censlvm',
    version='0.1.1',
    long_description='Maximum likelihood for latent variable models with continuous, binary and censored outcomes',
    # tell setuptools to look for any packages under 'src'
    packages=find_packages(where='src'),
    # tell setuptools that all packages will be under the 'src' directory
    # and nowhere else
    package_dir={'': 'src'},
    install_requires=['numpy>=1.21',
                      'scipy>=1.8',
                      'pandas>=1.4',
                      'pydantic>=1.9.0,<2'],
    entry_points={'console_scripts': ['censlvm = censlvm.cli:main']},
    test_suite='tests',
    zip_safe=False,
)
