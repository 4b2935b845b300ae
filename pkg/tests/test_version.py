# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""MAMoE Version Test"""

import logging
import re
import unittest

from eljef.mamoe import __version__

logging.disable(logging.ERROR)


class TestVersion(unittest.TestCase):
    def test_version(self):
        self.assertIsNotNone(__version__.VERSION)
        self.assertRegex(__version__.VERSION, re.compile(r'^\d{4}\.\d{1,2}\.\d+$'))


if __name__ == '__main__':
    unittest.main()
