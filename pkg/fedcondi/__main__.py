# -*- coding: utf-8 -*-

"""python -m fedcondi"""

from sys import exit as system_exit
from .cli import main

system_exit(main())
