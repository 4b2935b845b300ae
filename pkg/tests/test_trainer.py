# -*- coding: UTF-8 -*-
# SPDX-License-Identifier: 0BSD

"""MAMoE Training Harness Testing"""

import collections
import json
import logging
import os
import shutil
import tempfile
import unittest

import numpy as np

from eljef.mamoe import fops
from eljef.mamoe import trainer as tr
from eljef.mamoe.analytics import read_events
from eljef.mamoe.model import IGNORE_INDEX, TARGET_CODE, TARGET_TEXT, Model, ModelConfig, task_loss
from eljef.mamoe.numkit import ParamTensor
from eljef.mamoe.settings import ConfigError
from eljef.mamoe.stream import MODALITY_AUDIO, MODALITY_TEXT, ModalitySequence, write_fixture

logging.disable(logging.ERROR)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')

SMALL = ModelConfig(d_model=8, n_layers=1, n_heads=2, n_experts=4, k=2, d_ff=8, shared_d_ff=8, v_text=8,
                    code_vocab=8, d_feat=4, max_len=8, init_std=0.1)
SHORT = tr.TrainConfig(lr=1e-2, warmup_steps=2, total_steps=6, batch_size=2, seq_len=4, log_every=2)


class TestTaskSpec(unittest.TestCase):
    def test_invalid(self):
        tests = [
            tr.TaskSpec('translation'),
            tr.TaskSpec(tr.TASK_ASR, seq_len=5),
            tr.TaskSpec(tr.TASK_TTS, seq_len=0),
            tr.TaskSpec(tr.TASK_TEXT_LM, seq_len=1),
            tr.TaskSpec(tr.TASK_ASR, v_text=16, code_vocab=8),
        ]
        for test in tests:
            with self.assertRaises(ConfigError):
                test.validate()

    def test_maps_are_bijections(self):
        task = tr.TaskSpec(tr.TASK_ASR, seed=4, v_text=16, code_vocab=16)
        self.assertEqual(sorted(task.bijection.tolist()), list(range(16)))
        np.testing.assert_array_equal(task.bijection[task.inverse], np.arange(16))
        np.testing.assert_array_equal(task.bijection, tr.TaskSpec(tr.TASK_TTS, seed=4, v_text=16,
                                                                  code_vocab=16).bijection)


class TestGenBatch(unittest.TestCase):
    def test_deterministic(self):
        task = tr.TaskSpec(tr.TASK_ASR, seq_len=6, seed=1, v_text=8, code_vocab=8)
        first, again, other = tr.gen_batch(task, 3, 5), tr.gen_batch(task, 3, 5), tr.gen_batch(task, 3, 6)
        self.assertEqual(first.sequences, again.sequences)
        np.testing.assert_array_equal(first.targets, again.targets)
        self.assertNotEqual(first.sequences, other.sequences)

    def test_asr_layout(self):
        task = tr.TaskSpec(tr.TASK_ASR, seq_len=6, seed=2, v_text=8, code_vocab=8)
        batch = tr.gen_batch(task, 2, 0)
        self.assertEqual(len(batch.sequences), 2)
        self.assertEqual(batch.targets.shape, (12,))
        self.assertTrue(np.all(batch.target_kind == TARGET_TEXT))
        for index, seq in enumerate(batch.sequences):
            targets = batch.targets[index * 6:(index + 1) * 6]
            self.assertEqual(seq.modality.tolist(), [MODALITY_AUDIO, MODALITY_TEXT] * 3)
            for pos in range(0, 6, 2):
                code = seq.tokens[pos].token_id
                self.assertEqual(targets[pos], task.bijection[code])
                self.assertEqual(seq.tokens[pos + 1].token_id, task.bijection[code])
                self.assertEqual(targets[pos + 1], IGNORE_INDEX)

    def test_tts_targets_codes(self):
        task = tr.TaskSpec(tr.TASK_TTS, seq_len=4, seed=2, v_text=8, code_vocab=8)
        batch = tr.gen_batch(task, 1, 3)
        self.assertTrue(np.all(batch.target_kind == TARGET_CODE))
        seq = batch.sequences[0]
        self.assertEqual(seq.modality.tolist(), [MODALITY_TEXT, MODALITY_AUDIO] * 2)
        self.assertEqual(batch.targets[0], task.inverse[seq.tokens[0].token_id])

    def test_text_lm_chain(self):
        task = tr.TaskSpec(tr.TASK_TEXT_LM, seq_len=5, seed=2, v_text=8, code_vocab=8)
        batch = tr.gen_batch(task, 1, 0)
        ids = [t.token_id for t in batch.sequences[0]]
        self.assertEqual(batch.targets.tolist(), ids[1:] + [IGNORE_INDEX])
        for current, following in zip(ids, ids[1:]):
            self.assertEqual(task.successor[current], following)

    def test_instruct_tasks(self):
        speech = tr.TaskSpec(tr.TASK_SPEECH_INSTRUCT, seq_len=2, seed=3, v_text=8, code_vocab=8)
        batch = tr.gen_batch(speech, 1, 0)
        code = batch.sequences[0].tokens[0].token_id
        self.assertEqual(batch.targets[0], speech.response[speech.bijection[code]])

        text = tr.TaskSpec(tr.TASK_TEXT_INSTRUCT, seq_len=2, seed=3, v_text=8, code_vocab=8)
        batch = tr.gen_batch(text, 1, 0)
        self.assertEqual(batch.sequences[0].modality.tolist(), [MODALITY_TEXT, MODALITY_TEXT])
        self.assertEqual(batch.targets[0], text.response[batch.sequences[0].tokens[0].token_id])

    def test_codes_are_uniform(self):
        task = tr.TaskSpec(tr.TASK_ASR, seq_len=2, seed=0, v_text=64, code_vocab=64)
        counts = np.zeros(64)
        for step in range(100):
            for seq in tr.gen_batch(task, 100, step).sequences:
                counts[seq.tokens[0].token_id] += 1
        expected = counts.sum() / 64
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 99.9th percentile of chi-square with 63 degrees of freedom
        self.assertLess(chi2, 103.4)


class TestTrainConfig(unittest.TestCase):
    def test_invalid(self):
        tests = [
            {'mix': (('pseudo_asr', 0.5),)},
            {'mix': (('pseudo_asr', 1.5), ('pseudo_tts', -0.5))},
            {'mix': (('translation', 1.0),)},
            {'lr': -1.0},
            {'beta2': 1.0},
            {'total_steps': 0},
        ]
        for test in tests:
            with self.assertRaises(ConfigError):
                tr.TrainConfig(**test).validate()

    def test_dict_keeps_mix_order(self):
        cfg = tr.TrainConfig(mix=tr.STAGE_MIX[2])
        self.assertEqual(tr.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict(), sort_keys=True))), cfg)

    def test_mix_mapping(self):
        cfg = tr.TrainConfig.from_dict({'mix': {'pseudo_asr': 0.25, 'text_lm': 0.75}})
        self.assertEqual(cfg.mix, (('pseudo_asr', 0.25), ('text_lm', 0.75)))


class TestRunConfig(unittest.TestCase):
    def _write(self, data: dict) -> str:
        fd, path = tempfile.mkstemp('.json')
        with os.fdopen(fd, 'w', encoding='utf8') as handle:
            json.dump(data, handle)
        self.addCleanup(os.remove, path)
        return path

    def test_desk_config(self):
        run = tr.load_run_config(os.path.join(CONFIG_DIR, 'desk.json'), environ={})
        self.assertEqual(run.model, ModelConfig())
        self.assertEqual(run.stage(1).lr, 3e-3)
        self.assertEqual(run.stage(1).mix, tr.STAGE_MIX[1])
        self.assertEqual(run.stage(2).mix, tr.STAGE_MIX[2])
        self.assertEqual(run.stage(2).total_steps, 500)
        self.assertEqual(run.stage(2).batch_size, 16)
        with self.assertRaises(ConfigError):
            run.stage(3)

    def test_seed_override(self):
        run = tr.load_run_config(os.path.join(CONFIG_DIR, 'desk.json'), environ={'MAMOE_SEED': '9'})
        self.assertEqual(run.model.seed, 9)
        self.assertEqual(run.stage(1).seed, 9)
        self.assertEqual(run.stage(2).seed, 9)

    def test_mix_from_file(self):
        run = tr.load_run_config(self._write({'train': {'mix': {'pseudo_asr': 1.0}}}), environ={})
        self.assertEqual(run.stage(1).mix, (('pseudo_asr', 1.0),))
        self.assertEqual(run.stage(2).mix, (('pseudo_asr', 1.0),))

    def test_rejects(self):
        tests = [
            {'train': {'seq_len': 128}},
            {'train': {'learning_rate': 0.1}},
            {'stages': {'1': {'mix': {'pseudo_asr': 0.9}}}},
            {'stages': {'3': {'lr': 0.1}}},
        ]
        for test in tests:
            with self.assertRaises(ConfigError):
                tr.load_run_config(self._write(test), environ={})


class TestSchedule(unittest.TestCase):
    def test_lr_at(self):
        cfg = tr.TrainConfig(lr=1.0, min_lr_ratio=0.1, warmup_steps=4, total_steps=14)
        self.assertAlmostEqual(tr.lr_at(0, cfg), 0.25)
        self.assertAlmostEqual(tr.lr_at(3, cfg), 1.0)
        self.assertAlmostEqual(tr.lr_at(4, cfg), 1.0)
        self.assertAlmostEqual(tr.lr_at(9, cfg), 0.55)
        self.assertAlmostEqual(tr.lr_at(14, cfg), 0.1)
        self.assertAlmostEqual(tr.lr_at(100, cfg), 0.1)

    def test_task_for_step(self):
        self.assertEqual({tr.task_for_step(0, s, (('pseudo_asr', 1.0),)) for s in range(200)}, {'pseudo_asr'})
        self.assertEqual(tr.task_for_step(3, 17, tr.STAGE_MIX[1]), tr.task_for_step(3, 17, tr.STAGE_MIX[1]))

    def test_stage_mix_frequencies(self):
        tests = [
            {'stage': 1, 'kinds': {'pseudo_asr', 'pseudo_tts', 'text_lm'}},
            {'stage': 2, 'kinds': {'speech_instruct', 'text_instruct', 'pseudo_asr', 'pseudo_tts'}},
        ]
        for test in tests:
            mix = tr.STAGE_MIX[test['stage']]
            self.assertEqual({kind for kind, _ in mix}, test['kinds'])
            self.assertAlmostEqual(sum(ratio for _, ratio in mix), 1.0)
            counts = collections.Counter(tr.task_for_step(3, s, mix) for s in range(10000))
            self.assertEqual(set(counts), test['kinds'])
            for kind, ratio in mix:
                self.assertAlmostEqual(counts[kind] / 10000, ratio, delta=0.02, msg=f"stage {test['stage']}: {kind}")

    def test_zero_ratio_never_drawn(self):
        mix = (('pseudo_asr', 0.5), ('pseudo_tts', 0.0), ('text_lm', 0.5))
        self.assertNotIn('pseudo_tts', {tr.task_for_step(1, s, mix) for s in range(2000)})


class TestOptimizer(unittest.TestCase):
    def test_adamw_reference(self):
        param = ParamTensor([2.0], requires_grad=True)
        opt = tr.AdamW({'p': param}, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.01)
        p, m, v = 2.0, 0.0, 0.0
        for t in range(1, 21):
            grad = 2.0 * (p - 3.0)
            param.grad = np.array([2.0 * (param.data[0] - 3.0)])
            opt.step(0.05)
            m = 0.9 * m + 0.1 * grad
            v = 0.95 * v + 0.05 * grad * grad
            p = p * (1.0 - 0.05 * 0.01) - 0.05 * (m / (1.0 - 0.9 ** t)) / (np.sqrt(v / (1.0 - 0.95 ** t)) + 1e-8)
            self.assertAlmostEqual(param.data[0], p, delta=1e-10)
        self.assertEqual(opt.t, 20)

    def test_state_dict(self):
        param = ParamTensor(np.ones(3), requires_grad=True)
        opt = tr.AdamW({'p': param})
        param.grad = np.ones(3)
        opt.step(0.1)
        other = tr.AdamW({'p': ParamTensor(np.ones(3), requires_grad=True)})
        other.load_state_dict(opt.state_dict(), opt.t)
        np.testing.assert_array_equal(other.m['p'], opt.m['p'])
        self.assertEqual(sorted(opt.state_dict()), ['m/p', 'v/p'])
        with self.assertRaises(ValueError):
            other.load_state_dict({'m/p': np.ones(3)}, 1)

    def test_clip_grad_norm(self):
        params = [ParamTensor([0.0, 0.0]), ParamTensor([0.0])]
        params[0].grad, params[1].grad = np.array([3.0, 0.0]), np.array([4.0])
        self.assertAlmostEqual(tr.clip_grad_norm(params, 1.0), 5.0)
        self.assertAlmostEqual(float(np.sqrt(sum((p.grad ** 2).sum() for p in params))), 1.0)
        self.assertAlmostEqual(tr.clip_grad_norm(params, 0.0), 1.0)


class TestTrainStep(unittest.TestCase):
    def setUp(self):
        self.model = Model(SMALL)
        self.batch = tr.gen_batch(tr.TaskSpec(tr.TASK_ASR, 4, 0, 8, 8), 2, 0)

    def test_zero_lr_keeps_parameters(self):
        before = self.model.state_dict()
        cfg = SHORT._replace(lr=0.0)
        metrics = tr.train_step(self.model, self.batch, tr.AdamW.from_config(self.model.parameters(), cfg), cfg, 0)
        self.assertEqual(metrics.lr, 0.0)
        self.assertGreater(metrics.grad_norm, 0.0)
        for name, array in self.model.state_dict().items():
            np.testing.assert_array_equal(array, before[name])

    def test_observe(self):
        seen = []
        opt = tr.AdamW.from_config(self.model.parameters(), SHORT)
        tr.train_step(self.model, self.batch, opt, SHORT, 0, seen.append)
        self.assertEqual(len(seen), 1)
        self.assertEqual(seen[0].text_logits.shape[0], 8)

    def test_non_finite(self):
        self.model.embed_text.data[:] = np.nan
        opt = tr.AdamW.from_config(self.model.parameters(), SHORT)
        with self.assertRaises(tr.NonFiniteError) as context:
            tr.train_step(self.model, self.batch, opt, SHORT, 4)
        self.assertIn('embed.text', str(context.exception))

    def test_evaluate(self):
        loss = tr.evaluate(self.model, tr.TaskSpec(tr.TASK_ASR, 4, 0, 8, 8), 4)
        self.assertTrue(np.isfinite(loss))
        self.assertGreater(loss, 0.0)


class TestBatchPrefetcher(unittest.TestCase):
    def test_order(self):
        with tr.BatchPrefetcher(lambda step: step * 10, range(50), 3) as prefetcher:
            got = [prefetcher.get() for _ in range(50)]
        self.assertEqual(got, [(s, s * 10) for s in range(50)])

    def test_error(self):
        def make(step):
            if step == 2:
                raise ValueError('bad step')
            return step

        prefetcher = tr.BatchPrefetcher(make, range(5), 2)
        try:
            self.assertEqual(prefetcher.get(), (0, 0))
            self.assertEqual(prefetcher.get(), (1, 1))
            with self.assertRaises(ValueError):
                prefetcher.get()
        finally:
            prefetcher.close()

    def test_close_early(self):
        prefetcher = tr.BatchPrefetcher(lambda step: step, range(1000), 1)
        prefetcher.get()
        prefetcher.close()


class TestTrainer(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_run_writes_outputs(self):
        out = os.path.join(self.tmp, 'run')
        trainer = tr.Trainer(Model(SMALL), SHORT._replace(ckpt_every=3), 1, out)
        rows = trainer.run()
        self.assertEqual([r.step for r in rows], list(range(6)))
        self.assertEqual(tr.read_history(os.path.join(out, 'history.csv')), rows)
        for name in ('checkpoint.bin', 'checkpoint-3.bin', 'checkpoint-6.bin'):
            self.assertTrue(os.path.isfile(os.path.join(out, name)), name)
        steps = {event.step for event in read_events(os.path.join(out, 'events.csv'))}
        self.assertEqual(steps, {0, 2, 4, 5})

    def test_prefetch_matches_inline(self):
        inline = tr.Trainer(Model(SMALL), SHORT).run()
        prefetched = tr.Trainer(Model(SMALL), SHORT._replace(prefetch=2)).run()
        self.assertEqual(inline, prefetched)

    def test_seq_len_limit(self):
        with self.assertRaises(ConfigError):
            tr.Trainer(Model(SMALL), SHORT._replace(seq_len=10))

    def test_resume_replays(self):
        whole_dir = os.path.join(self.tmp, 'whole')
        whole = tr.Trainer(Model(SMALL), SHORT._replace(ckpt_every=3), 1, whole_dir).run()

        resumed = tr.Trainer.from_checkpoint(os.path.join(whole_dir, 'checkpoint-3.bin'),
                                             os.path.join(self.tmp, 'resumed'))
        self.assertEqual(resumed.step, 3)
        self.assertEqual(resumed.run(), whole[3:])

    def test_checkpoint_contents(self):
        trainer = tr.Trainer(Model(SMALL), SHORT, 2)
        trainer.run()
        ckpt = trainer.checkpoint()
        self.assertEqual(ckpt.step, 6)
        self.assertEqual(ckpt.config['stage'], 2)
        self.assertEqual(ckpt.extra['optimizer_t'], 6)
        self.assertEqual(set(ckpt.params), set(trainer.model.parameters()))

    def test_run_stage_events_sink(self):
        class Sink:
            def __init__(self):
                self.events = []

            def write(self, events):
                self.events.extend(events)

        sink = Sink()
        tr.run_stage(Model(SMALL), SHORT, events=sink)
        self.assertEqual({e.step for e in sink.events}, {0, 2, 4, 5})
        self.assertEqual(len(sink.events), 4 * 2 * 4)


class TestFixtureEvaluation(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, 'seqs.jsonl')
        self.seqs = [
            ModalitySequence.from_ids([0, 1, 1, 0], [3, 5, 2, 7]),
            ModalitySequence.from_ids([1, 0, 0], [4, 1, 6]),
            ModalitySequence.from_ids([0], [2]),
        ]
        write_fixture(self.path, self.seqs)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_next_token_targets(self):
        tests = [
            {'seq': self.seqs[0], 'targets': [5, 2, 7, IGNORE_INDEX],
             'kinds': [TARGET_CODE, TARGET_CODE, TARGET_TEXT, TARGET_TEXT]},
            {'seq': self.seqs[1], 'targets': [1, 6, IGNORE_INDEX], 'kinds': [TARGET_TEXT] * 3},
            {'seq': self.seqs[2], 'targets': [IGNORE_INDEX], 'kinds': [TARGET_TEXT]},
        ]
        for test in tests:
            targets, kinds = tr.next_token_targets(test['seq'])
            self.assertEqual(targets.tolist(), test['targets'])
            self.assertEqual(kinds.tolist(), test['kinds'])

    def test_evaluate_fixture(self):
        model = Model(SMALL)
        score = tr.evaluate_fixture(model, self.path)
        self.assertEqual((score.sequences, score.positions), (3, 5))
        self.assertTrue(np.isfinite(score.loss))
        self.assertGreater(score.loss, 0.0)
        self.assertTrue(0.0 <= score.accuracy <= 1.0)

        pairs = [tr.next_token_targets(seq) for seq in self.seqs]
        want = task_loss(model.forward(self.seqs), np.concatenate([p[0] for p in pairs]),
                         np.concatenate([p[1] for p in pairs]), 0.0)
        self.assertAlmostEqual(score.loss, want.item(), places=10)

        self.assertEqual([len(p) for p in score.predictions], [3, 2])
        self.assertEqual([t.modality for t in score.predictions[0]], [1, 1, 0])
        self.assertEqual([t.modality for t in score.predictions[1]], [0, 0])

    def test_invalid_fixtures(self):
        tests = [
            '',
            '{"modality": 0, "id": 1}\n\n{"modality": 1, "id": 2}\n',
            '{"modality": 0, "id": 99}\n{"modality": 0, "id": 1}\n',
            '{"modality": 2, "id": 1}\n{"modality": 0, "id": 1}\n',
            '{"modality": 0, "id": 1}\n' * 9,
        ]
        for data in tests:
            fops.file_write(self.path, data, newline='\n')
            with self.assertRaises(ValueError, msg=repr(data)):
                tr.evaluate_fixture(Model(SMALL), self.path)

    def test_missing_fixture(self):
        with self.assertRaises(OSError):
            tr.evaluate_fixture(Model(SMALL), os.path.join(self.tmp, 'absent.jsonl'))

    def test_model_from_checkpoint(self):
        out = os.path.join(self.tmp, 'run')
        trainer = tr.Trainer(Model(SMALL), SHORT, 1, out)
        trainer.run()
        model = tr.model_from_checkpoint(os.path.join(out, 'checkpoint.bin'))
        for name, tensor in trainer.model.parameters().items():
            np.testing.assert_array_equal(model.parameters()[name].data, tensor.data)
        self.assertEqual(tr.evaluate_fixture(model, self.path), tr.evaluate_fixture(trainer.model, self.path))


@unittest.skipUnless(os.environ.get('MAMOE_SLOW'), 'set MAMOE_SLOW=1 to run training oracles')
class TestTrainingOracle(unittest.TestCase):
    def test_pseudo_asr_learns(self):
        for seed in (0, 1, 2):
            model = Model(ModelConfig(seed=seed))
            cfg = tr.TrainConfig(seed=seed)
            task = tr.TaskSpec(tr.TASK_ASR, cfg.seq_len, seed, model.config.v_text, model.config.code_vocab)
            initial = tr.evaluate(model, task, 64)
            tr.run_stage(model, cfg)
            self.assertLess(tr.evaluate(model, task, 64), 0.5 * initial, f"seed {seed}")
