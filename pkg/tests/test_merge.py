# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""MAMoE Strict Merge Testing"""

import logging
import unittest

from eljef.mamoe import merge

logging.disable(logging.ERROR)


class TestMergeStrict(unittest.TestCase):
    def test_merge_strict(self):
        tests = [
            {
                'base': {
                    'test': 'test'
                },
                'override': dict(),
                'opaque': (),
                'want': {
                    'test': 'test'
                }
            },
            {
                'base': {
                    'test': 'test2'
                },
                'override': {
                    'test': 'test'
                },
                'opaque': (),
                'want': {
                    'test': 'test'
                }
            },
            {
                'base': {
                    'train': {
                        'lr': 0.003,
                        'seq_len': 16
                    }
                },
                'override': {
                    'train': {
                        'lr': 0.01
                    }
                },
                'opaque': (),
                'want': {
                    'train': {
                        'lr': 0.01,
                        'seq_len': 16
                    }
                }
            },
            {
                'base': {
                    'mix': {
                        'pseudo_asr': 0.5,
                        'pseudo_tts': 0.5
                    }
                },
                'override': {
                    'mix': {
                        'text_lm': 1.0
                    }
                },
                'opaque': ('mix',),
                'want': {
                    'mix': {
                        'text_lm': 1.0
                    }
                }
            }
        ]
        for test in tests:
            got = merge.merge_strict(test['base'], test['override'], test['opaque'])
            self.assertDictEqual(got, test['want'])

    def test_merge_strict_unknown_key(self):
        tests = [
            {'override': {'nope': 1}, 'want': 'nope'},
            {'override': {'train': {'nope': 1}}, 'want': 'train.nope'},
        ]
        for test in tests:
            with self.assertRaises(merge.UnknownKeyError) as context:
                merge.merge_strict({'train': {'lr': 0.1}}, test['override'])
            self.assertEqual(context.exception.key, test['want'])

    def test_merge_strict_copies(self):
        base = {'train': {'lr': 0.1}}
        got = merge.merge_strict(base, {'train': {'lr': 0.2}})
        got['train']['lr'] = 0.3
        self.assertEqual(base['train']['lr'], 0.1)


if __name__ == '__main__':
    unittest.main()
