# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""MAMoE Settings Handling"""

import logging
import os
import tempfile
import unittest

from eljef.mamoe.settings import ConfigError, Settings

logging.disable(logging.ERROR)


class TestSettings(unittest.TestCase):
    @staticmethod
    def _get_file(data: str, suffix: str = ".yaml") -> str:
        fd, path = tempfile.mkstemp(suffix, None, tempfile.gettempdir(), True)
        os.write(fd, data.encode('UTF-8'))
        os.close(fd)

        return path

    def test_init_no_file(self):
        defaults = {
            'test': 'test'
        }

        t = Settings(defaults, '', environ={})
        got = t.get_all()
        self.assertDictEqual(got, defaults)

    def test_init_yaml_file(self):
        defaults = {
            'test': 'test',
            'user': None
        }
        want = {
            'test': 'test',
            'user': 'user'
        }

        path = self._get_file("{'user': 'user'}")
        t = Settings(defaults, path, environ={})
        os.remove(path)

        got = t.get_all()
        self.assertDictEqual(got, want)

    def test_init_json_file(self):
        path = self._get_file('{"train": {"lr": 0.5}}', ".json")
        t = Settings({'train': {'lr': 0.1, 'seed': 0}}, path, environ={})
        os.remove(path)

        self.assertDictEqual(t.get_all(), {'train': {'lr': 0.5, 'seed': 0}})

    def test_init_unknown_field(self):
        path = self._get_file("{'sys': 'sys'}")
        try:
            with self.assertRaises(ConfigError) as context:
                Settings({'test': 'test'}, path, environ={})
        finally:
            os.remove(path)
        self.assertIn('sys', str(context.exception))

    def test_init_missing_file(self):
        self.assertRaises(FileNotFoundError, Settings, {'test': 'test'},
                          os.path.join(tempfile.gettempdir(), 'hopefully_this_file_does_not_exist.yaml'))

    def test_aliases_and_ignored(self):
        path = self._get_file("{'hidden_size': 64, 'torch_dtype': 'bfloat16'}")
        t = Settings({'d_model': 32}, path, aliases={'hidden_size': 'd_model'}, ignored=('torch_dtype',),
                     environ={})
        os.remove(path)

        self.assertDictEqual(t.get_all(), {'d_model': 64})

    def test_alias_clash(self):
        self.assertRaises(ConfigError, Settings.canonicalize, {'d_model': 1, 'hidden_size': 2},
                          {'hidden_size': 'd_model'}, ())

    def test_environment(self):
        defaults = {'seed': 0, 'train': {'seed': 0}}
        env = {'MAMOE_SEED': ['seed', 'train.seed']}
        tests = [
            {'environ': {}, 'want': 0},
            {'environ': {'MAMOE_SEED': ''}, 'want': 0},
            {'environ': {'MAMOE_SEED': '7'}, 'want': 7},
        ]
        for test in tests:
            t = Settings(defaults, env=env, environ=test['environ'])
            self.assertEqual(t.get('seed'), test['want'])
            self.assertEqual(t.get('train.seed'), test['want'])

        self.assertRaises(ConfigError, Settings, defaults, env=env, environ={'MAMOE_SEED': '[7'})

    def test_get(self):
        t = Settings({'test': 'test', 'train': {'lr': 0.1}}, '', environ={})
        self.assertEqual('test', t.get('test'))
        self.assertEqual(0.1, t.get('train.lr'))
        self.assertIsNone(t.get('missing'))
        self.assertIsNone(t.get('test.lr'))

    def test_read(self):
        want = {
            'test': 'test'
        }

        path = self._get_file("{'test': 'test'}")
        got = Settings.read(path)
        os.remove(path)
        self.assertDictEqual(want, got)


if __name__ == '__main__':
    unittest.main()
