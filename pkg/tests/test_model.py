# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""MAMoE Model Testing"""

import json
import logging
import os
import tempfile
import unittest

import numpy as np

from eljef.mamoe import model as mm
from eljef.mamoe.mamoe import VARIANT_DENSE, VARIANT_MAMOE, ExpertPartition, load_balance_loss
from eljef.mamoe.numkit import ParamTensor
from eljef.mamoe.settings import ConfigError
from eljef.mamoe.stream import ModalitySequence

logging.disable(logging.ERROR)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')

TINY = mm.ModelConfig(d_model=8, n_layers=2, n_heads=2, n_experts=4, k=2, d_ff=6, shared_d_ff=6, v_text=8,
                      code_vocab=8, d_feat=4, max_len=8, init_std=0.3)


def _write_json(data: dict) -> str:
    fd, path = tempfile.mkstemp('.json')
    with os.fdopen(fd, 'w', encoding='utf8') as handle:
        json.dump(data, handle)
    return path


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


class TestModelConfig(unittest.TestCase):
    def test_defaults(self):
        config = mm.ModelConfig().validate()
        self.assertEqual(config.partition(), ExpertPartition.index_split(8))
        self.assertEqual(config.router().k, 2)

    def test_invalid(self):
        tests = [
            {'d_model': 30},
            {'hidden_act': 'gelu'},
            {'variant': 'switch'},
            {'k': 5},
            {'d_ff': 0},
            {'audio_expert_indices': (8,)},
        ]
        for test in tests:
            with self.assertRaises(ConfigError):
                mm.ModelConfig(**test).validate()

    def test_from_dict_infers_experts(self):
        config = mm.ModelConfig.from_dict({'audio_expert_indices': [4, 5, 6, 7, 8, 9]})
        self.assertEqual(config.n_experts, 10)
        self.assertEqual(config.partition().audio_indices, (4, 5, 6, 7, 8, 9))

    def test_resolve_precision(self):
        self.assertEqual(mm.resolve_precision('bfloat16'), 'float32')
        self.assertEqual(mm.resolve_precision('float64'), 'float64')
        with self.assertRaises(ConfigError):
            mm.resolve_precision('int8')

    def test_reference_schema_file(self):
        config = mm.load_model_config(os.path.join(CONFIG_DIR, 'reference_schema.json'), environ={})
        self.assertEqual(config.aux_alpha, 0.001)
        self.assertEqual(config.hidden_act, 'silu')
        self.assertEqual(config.n_experts, 64)
        self.assertEqual(config.partition().audio_indices, tuple(range(32, 64)))
        self.assertEqual(config.partition().text_indices, tuple(range(32)))
        self.assertEqual(config.d_model, 2048)
        self.assertEqual(config.n_layers, 27)
        self.assertEqual(config.v_text, 102400)
        self.assertEqual(config.precision, 'float32')

    def test_unknown_field(self):
        path = _write_json({'hidden_size': 16, 'num_experts': 8})
        try:
            with self.assertRaises(ConfigError) as context:
                mm.load_model_config(path, environ={})
            self.assertIn('num_experts', str(context.exception))
        finally:
            os.remove(path)

    def test_alias_clash(self):
        path = _write_json({'hidden_size': 16, 'd_model': 16})
        try:
            with self.assertRaises(ConfigError):
                mm.load_model_config(path, environ={})
        finally:
            os.remove(path)

    def test_seed_from_environment(self):
        path = _write_json({'seed': 3})
        try:
            self.assertEqual(mm.load_model_config(path, environ={}).seed, 3)
            self.assertEqual(mm.load_model_config(path, environ={'MAMOE_SEED': '11'}).seed, 11)
        finally:
            os.remove(path)


class TestAttention(unittest.TestCase):
    def test_causal_mask(self):
        got = mm.causal_mask([2, 1])
        want = [[True, False, False], [True, True, False], [False, False, True]]
        self.assertEqual(got.tolist(), want)

    def test_hand_trace(self):
        eye = ParamTensor(np.eye(2))
        weights = mm.AttentionWeights(eye, eye, eye, eye)
        got = mm.attention_forward(ParamTensor(np.eye(2)), weights, 1).data

        score = 1.0 / np.sqrt(2.0)
        a0, a1 = 1.0 / (1.0 + np.exp(score)), np.exp(score) / (1.0 + np.exp(score))
        np.testing.assert_allclose(got, [[1.0, 0.0], [a0, a1]])

    def test_heads_split_columns(self):
        rng = np.random.default_rng(0)
        h = ParamTensor(rng.normal(size=(3, 4)))
        weights = mm.AttentionWeights(*(ParamTensor(rng.normal(size=(4, 4))) for _ in range(4)))
        got = mm.attention_forward(h, weights, 2).data

        q, k, v = (h.data @ w.data for w in weights[:3])
        heads = []
        for cols in (slice(0, 2), slice(2, 4)):
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(2.0)
            scores = np.where(np.tril(np.ones((3, 3), dtype=bool)), scores, -np.inf)
            probs = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            heads.append(probs @ v[:, cols])
        np.testing.assert_allclose(got, np.concatenate(heads, axis=1) @ weights.wo.data)


class TestModel(unittest.TestCase):
    def setUp(self):
        self.model = mm.Model(TINY)
        self.seq = ModalitySequence.from_ids([0, 1, 1, 0, 1], [3, 5, 2, 7, 0])

    def test_forward_shapes(self):
        out = mm.model_forward(self.seq, self.model)
        self.assertEqual(out.text_logits.shape, (5, 8))
        self.assertEqual(out.code_logits.shape, (5, 8))
        self.assertEqual(len(out.decisions), 2)
        self.assertEqual(out.modality.tolist(), [0, 1, 1, 0, 1])
        self.assertTrue(np.isfinite(out.aux_loss.item()))
        self.assertGreater(out.aux_loss.item(), 0.0)

    def test_single_modality_stays_in_group(self):
        out = mm.model_forward(ModalitySequence.from_ids([1] * 6, [0, 1, 2, 3, 4, 5]), self.model)
        for routing in out.decisions:
            self.assertTrue(set(routing.indices.reshape(-1).tolist()) <= {2, 3})

    def test_batch_matches_single(self):
        other = ModalitySequence.from_ids([1, 0, 0], [4, 1, 6])
        batched = self.model.forward([self.seq, other])
        first = mm.model_forward(self.seq, self.model)
        second = mm.model_forward(other, self.model)
        np.testing.assert_allclose(batched.text_logits.data[:5], first.text_logits.data, atol=1e-12)
        np.testing.assert_allclose(batched.code_logits.data[5:], second.code_logits.data, atol=1e-12)
        self.assertEqual(batched.lengths, (5, 3))

    def test_max_len(self):
        with self.assertRaises(ValueError):
            mm.model_forward(ModalitySequence.from_ids([0] * 9, [1] * 9), self.model)

    def test_parameter_names(self):
        names = list(self.model.parameters())
        self.assertEqual(names[:3], ['embed.text', 'embed.pos', 'embed.audio_proj'])
        self.assertEqual(names[-3:], ['norm.final', 'head.text', 'head.code'])
        for name in ('layers.0.attn.wq', 'layers.1.moe_norm', 'layers.1.moe.w_gate', 'layers.0.moe.experts.3.up_w',
                     'layers.0.moe.shared.down_w'):
            self.assertIn(name, names)

    def test_seeded_init(self):
        again = mm.Model(TINY)
        for name, array in self.model.state_dict().items():
            np.testing.assert_array_equal(array, again.state_dict()[name])

    def test_state_dict(self):
        other = mm.Model(TINY._replace(seed=5))
        other.load_state_dict(self.model.state_dict())
        np.testing.assert_array_equal(mm.model_forward(self.seq, other).text_logits.data,
                                      mm.model_forward(self.seq, self.model).text_logits.data)

        state = self.model.state_dict()
        del state['head.code']
        with self.assertRaises(ValueError):
            other.load_state_dict(state)
        state = self.model.state_dict()
        state['head.code'] = np.zeros((2, 2))
        with self.assertRaises(ValueError):
            other.load_state_dict(state)

    def test_dense_variant(self):
        dense = mm.Model(TINY._replace(variant=VARIANT_DENSE))
        out = mm.model_forward(self.seq, dense)
        self.assertEqual(out.decisions, [None, None])
        self.assertEqual(out.aux_loss.item(), 0.0)
        self.assertIn('layers.0.moe.dense.gate_w', dense.parameters())

    def test_precision_is_per_model(self):
        wide = mm.Model(TINY)
        narrow = mm.Model(TINY._replace(precision='float32'))
        tests = [
            {'model': wide, 'want': np.float64},
            {'model': narrow, 'want': np.float32},
        ]
        for test in tests:
            out = mm.model_forward(self.seq, test['model'])
            for tensor in (out.text_logits, out.code_logits, out.aux_loss):
                self.assertEqual(tensor.data.dtype, test['want'])
            for name, tensor in test['model'].parameters().items():
                self.assertEqual(tensor.data.dtype, test['want'], name)
        np.testing.assert_array_equal(narrow.embed_text.data, wide.embed_text.data.astype(np.float32))
        self.assertEqual(ParamTensor([1.0, 2.0]).data.dtype, np.float64)

    def test_logits_are_causal(self):
        base = mm.model_forward(self.seq, self.model)
        tests = [
            {'modalities': [0, 1, 1, 1, 0], 'ids': [3, 5, 2, 4, 6], 'keep': 3},
            {'modalities': [0, 1, 1, 0, 0], 'ids': [3, 5, 2, 7, 1], 'keep': 4},
            {'modalities': [0, 0, 0, 0, 0], 'ids': [3, 1, 1, 1, 1], 'keep': 1},
        ]
        for test in tests:
            out = mm.model_forward(ModalitySequence.from_ids(test['modalities'], test['ids']), self.model)
            keep = test['keep']
            np.testing.assert_allclose(out.text_logits.data[:keep], base.text_logits.data[:keep], rtol=1e-10,
                                       atol=1e-12)
            np.testing.assert_allclose(out.code_logits.data[:keep], base.code_logits.data[:keep], rtol=1e-10,
                                       atol=1e-12)

    def test_aux_loss_is_layer_mean(self):
        out = mm.model_forward(self.seq, self.model)
        layers = [load_balance_loss(routing, self.model.part).item() for routing in out.decisions]
        self.assertEqual(len(layers), 2)
        self.assertAlmostEqual(out.aux_loss.item(), (layers[0] + layers[1]) / 2.0, places=12)


class TestTaskLoss(unittest.TestCase):
    def test_hand_cross_entropy(self):
        text = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0], [2.0, 1.0, 0.0]])
        code = np.array([[0.3, 0.1], [1.0, 0.0], [0.2, 0.9]])
        out = mm.ForwardOutput(ParamTensor(text), ParamTensor(code), ParamTensor(2.0), [], np.zeros(3))
        got = mm.task_loss(out, [1, mm.IGNORE_INDEX, 0], [mm.TARGET_TEXT, mm.TARGET_TEXT, mm.TARGET_CODE], 0.5)
        want = -(_log_softmax(text[0])[1] + _log_softmax(code[2])[0]) / 2 + 0.5 * 2.0
        self.assertAlmostEqual(got.item(), want, places=12)

    def test_no_targets(self):
        out = mm.ForwardOutput(ParamTensor(np.zeros((2, 3))), ParamTensor(np.zeros((2, 3))), ParamTensor(0.0), [],
                               np.zeros(2))
        with self.assertRaises(ValueError):
            mm.task_loss(out, [mm.IGNORE_INDEX, mm.IGNORE_INDEX], [0, 0], 0.0)
        with self.assertRaises(ValueError):
            mm.task_loss(out, [1], [0], 0.0)

    def test_greedy_predict(self):
        out = mm.ForwardOutput(ParamTensor([[0.0, 1.0], [3.0, 1.0]]), ParamTensor([[5.0, 1.0], [0.0, 1.0]]),
                               ParamTensor(0.0), [], np.zeros(2))
        self.assertEqual(mm.greedy_predict(out).tolist(), [1, 0])
        self.assertEqual(mm.greedy_predict(out, mm.TARGET_CODE).tolist(), [0, 1])


class TestGradCheckModel(unittest.TestCase):
    def test_variants(self):
        for variant in (VARIANT_MAMOE, VARIANT_DENSE):
            reports = mm.gradcheck_model(mm.ModelConfig(variant=variant))
            self.assertGreater(sum(r.checked for r in reports.values()), 0)
            worst = max(reports.items(), key=lambda item: item[1].max_rel_err)
            self.assertLess(worst[1].max_rel_err, 1e-4, f"{variant}: {worst[0]}")
            for name, report in reports.items():
                self.assertTrue(report.passed(1e-4), f"{variant}: {name}")
