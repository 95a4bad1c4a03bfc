# -*- coding: utf-8 -*-

from setuptools import setup

setup(name='fedcondi',
      version='1.0',
      packages=['fedcondi'],
      python_requires='>=3.8',
      install_requires=['numpy>=1.22', 'scipy>=1.8', 'pandas>=1.4',
                        'tomli>=1.1; python_version < "3.11"',
                        'tomli-w>=1.0', 'psutil>=5.6.5',
                        'python-dateutil>=2.8.1'],
      extras_require={'test': ['pytest>=7.0']},
      entry_points={'console_scripts': ['fedcondi=fedcondi.cli:main']},
      description='Federated conditional-diffusion imputation for '
                  'multimodal classification with missing modalities.',
      long_description=open('README.md', 'r').read(),
      long_description_content_type='text/markdown',
      classifiers=[
          'Development Status :: 4 - Beta',
          'Environment :: Console',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: BSD License',
          'Operating System :: OS Independent',
          'Programming Language :: Python :: 3',
          'Topic :: Scientific/Engineering :: Artificial Intelligence',
          ],
      )
