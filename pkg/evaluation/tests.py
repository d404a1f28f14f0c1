import tempfile
from fractions import Fraction
from io import StringIO
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management import call_command
from django.test import SimpleTestCase

from clouds.pointcloud import Pose
from datasets.io import read_csv
from datasets.manifest import Manifest, SubmapRecord
from descriptors.backbone import BackboneConfig
from descriptors.head import HeadConfig
from descriptors.model_io import save_params
from descriptors.pipeline import DescriptorModel
from evaluation.index import EntryMeta, RetrievalIndex
from evaluation.metrics import QueryResult, f1_at, max_f1, mrr, random_recall_at_1, recall_at_n
from evaluation.protocols import EvalConfig, evaluate_inter, evaluate_intra
from evaluation.reports import EvalReport, write_curve, write_report
from forestlpr.exceptions import ConfigError, DatasetError, NumericError, UndefinedMetricError

E0, E1, E2 = np.eye(3)


def meta(sid, timestamp=0.0, x=0.0, sequence='s'):
    return EntryMeta(sid, sequence, timestamp, x, 0.0)


def record(sid, sequence, timestamp, x):
    return SubmapRecord(id=sid, sequence=sequence, timestamp=timestamp, pcd=f'{sid}.pcd', pose=Pose([x, 0.0, 0.0]))


def result(ranked, positives, similarities=None):
    similarities = similarities or tuple(1.0 - 0.1 * i for i in range(len(ranked)))
    return QueryResult('q', tuple(ranked), tuple(similarities), frozenset(positives))


class RetrievalIndexTests(SimpleTestCase):

    def test_ranking_and_tie_break(self):
        index = RetrievalIndex([E1, E0, E0, E2], [meta('d'), meta('b'), meta('a'), meta('c')])
        ranked = index.query([1.0, 0.1, 0.0])
        self.assertEqual([c.id for c in ranked], ['a', 'b', 'd', 'c'])
        self.assertAlmostEqual(ranked[0].similarity, 1 / np.sqrt(1.01))
        self.assertEqual([c.id for c in index.query(E0, top_k=2)], ['a', 'b'])

    def test_intra_window(self):
        metas = [meta(f't{t}', float(t)) for t in (0, 5, 10, 20, 30)]
        index = RetrievalIndex(np.tile(E0, (5, 1)), metas)
        ranked = index.query(E0, metas[3], mode='intra', window=10.0)
        self.assertEqual(sorted(c.id for c in ranked), ['t0', 't10', 't5'])
        self.assertEqual(index.query(E0, metas[0], mode='intra', window=10.0), [])

    def test_inter_excludes_only_the_query(self):
        metas = [meta('a', 0.0), meta('b', 0.0)]
        index = RetrievalIndex([E0, E1], metas)
        self.assertEqual([c.id for c in index.query(E0, metas[0], mode='inter')], ['b'])

    def test_invalid_inputs(self):
        with self.assertRaises(NumericError):
            RetrievalIndex([[2.0, 0.0, 0.0]], [meta('a')])
        with self.assertRaises(DatasetError):
            RetrievalIndex([E0, E1], [meta('a'), meta('a')])
        with self.assertRaises(DatasetError):
            RetrievalIndex(np.zeros((0, 3)), []).query(E0)
        index = RetrievalIndex([E0], [meta('a')])
        with self.assertRaises(NumericError):
            index.query([0.0, 0.0, 0.0])
        with self.assertRaises(ConfigError):
            index.query(E0, meta('q'), mode='nearby')

    def test_descriptors_are_read_only(self):
        index = RetrievalIndex([E0], [meta('a')])
        with self.assertRaises(ValueError):
            index.descriptors[0, 0] = 0.5


class MetricTests(SimpleTestCase):

    def setUp(self):
        self.results = [
            result(['p', 'x', 'y'], {'p'}),
            result(['x', 'p', 'y'], {'p'}),
            result(['x', 'y', 'p'], {'p'}),
            result(['x', 'y', 'z'], set()),
        ]

    def test_recall_at_n_ignores_queries_without_positives(self):
        self.assertAlmostEqual(recall_at_n(self.results, 1), 1 / 3)
        self.assertAlmostEqual(recall_at_n(self.results, 2), 2 / 3)
        self.assertEqual(recall_at_n(self.results, 3), 1.0)

    def test_mrr_cutoff(self):
        self.assertAlmostEqual(mrr(self.results, k=2), 0.5)
        self.assertAlmostEqual(mrr(self.results, k=25), (1 + 1 / 2 + 1 / 3) / 3)

    def test_undefined_without_positives(self):
        with self.assertRaises(UndefinedMetricError):
            recall_at_n(self.results[3:], 1)
        with self.assertRaises(UndefinedMetricError):
            mrr([], 25)
        with self.assertRaises(UndefinedMetricError):
            recall_at_n(self.results, 0)

    def test_max_f1_sweeps_top1_similarities(self):
        results = [
            result(['p', 'x'], {'p'}, (0.9, 0.1)),
            result(['x', 'p'], {'p'}, (0.8, 0.1)),
            result(['p', 'x'], {'p'}, (0.7, 0.1)),
            result(['x', 'y'], set(), (0.6, 0.1)),
        ]
        self.assertAlmostEqual(f1_at(results, 0.9), 0.5)
        self.assertAlmostEqual(f1_at(results, 0.6), 2 / 3)
        self.assertAlmostEqual(max_f1(results), 0.8)
        self.assertEqual(f1_at(results, 0.95), 0.0)

    def test_max_f1_needs_an_answer(self):
        with self.assertRaises(UndefinedMetricError):
            max_f1([QueryResult('q', (), (), frozenset())])

    def test_random_recall(self):
        results = [result(['a', 'b', 'c', 'd'], {'a', 'b'}), result(['a', 'b', 'c', 'd'], {'c'})]
        self.assertAlmostEqual(random_recall_at_1(results), 0.375)


def retrieval_table(seed):
    """Small random table: ranked candidates, descending similarities, positive sets."""
    rng = np.random.default_rng(seed)
    database = [f'd{i}' for i in range(6)]
    table = []
    for q in range(int(rng.integers(2, 7))):
        ranked = [str(d) for d in rng.permutation(database)[:int(rng.integers(1, 7))]]
        similarities = sorted(np.round(rng.uniform(-1, 1, len(ranked)), 1), reverse=True)
        positives = {d for d in database if rng.uniform() < 0.3}
        if q == 0:
            positives.add(ranked[-1])
        table.append(QueryResult(f'q{q}', tuple(ranked), tuple(float(s) for s in similarities), frozenset(positives)))
    return table


def enumerated_recall(table, n):
    scored = [r for r in table if r.positives]
    hits = [any(r.ranked[i] in r.positives for i in range(min(n, len(r.ranked)))) for r in scored]
    return hits.count(True) / len(scored)


def enumerated_mrr(table, k):
    scored = [r for r in table if r.positives]
    total = Fraction(0)
    for r in scored:
        ranks = [i + 1 for i in range(min(k, len(r.ranked))) if r.ranked[i] in r.positives]
        total += Fraction(1, min(ranks)) if ranks else 0
    return float(total / len(scored))


def enumerated_max_f1(table):
    """Best F1 over every similarity in the table as a threshold, plus one above them all."""
    thresholds = {s for r in table for s in r.similarities} | {2.0}
    best = Fraction(0)
    for threshold in thresholds:
        tp = sum(1 for r in table if r.similarities[0] >= threshold and r.ranked[0] in r.positives)
        fp = sum(1 for r in table if r.similarities[0] >= threshold and r.ranked[0] not in r.positives)
        fn = sum(1 for r in table if r.similarities[0] < threshold and r.positives)
        if tp:
            best = max(best, Fraction(2 * tp, 2 * tp + fp + fn))
    return float(best)


class MetricOracleTests(SimpleTestCase):

    def test_twenty_tables_match_enumeration(self):
        for seed in range(20):
            table = retrieval_table(seed)
            for n in range(1, 8):
                self.assertEqual(recall_at_n(table, n), enumerated_recall(table, n), f'table {seed} R@{n}')
                self.assertAlmostEqual(mrr(table, k=n), enumerated_mrr(table, n), places=12,
                                       msg=f'table {seed} MRR@{n}')
            self.assertAlmostEqual(max_f1(table), enumerated_max_f1(table), places=12, msg=f'table {seed} F1')

    def test_ranks_one_two_and_missing(self):
        table = [result(['p', 'x'], {'p'}), result(['x', 'p'], {'p'}), result(['x', 'y'], {'p'})]
        self.assertEqual(enumerated_mrr(table, 25), 0.5)
        self.assertAlmostEqual(mrr(table, 25), 0.5)


class ProtocolTests(SimpleTestCase):

    def test_intra_loop_closure(self):
        manifest = Manifest([
            record('a0', 'A', 0.0, 0.0), record('a1', 'A', 100.0, 50.0),
            record('a2', 'A', 700.0, 0.5), record('a3', 'A', 800.0, 50.5),
        ])
        report = evaluate_intra(manifest, ['a0', 'a1', 'a2', 'a3'], [E0, E1, E0, E1], EvalConfig(), jobs=2)
        self.assertEqual(report.value('intra', 'A', 'queries'), 4)
        self.assertEqual(report.value('intra', 'A', 'skipped_queries'), 2)
        self.assertEqual(report.value('intra', 'A', 'queries_with_positive'), 2)
        for metric in ('recall@1', 'recall@25', 'max_f1', 'mrr'):
            self.assertEqual(report.value('intra', 'A', metric), 1.0)
        self.assertEqual(report.value('intra', 'A', 'random_recall@1'), 0.5)
        self.assertEqual([p['radius'] for p in report.curve], [float(r) for r in range(1, 11)])
        self.assertTrue(all(p['recall_at_1'] == 1.0 and p['queries'] == 2 for p in report.curve))

    def test_intra_without_revisits_skips_metrics(self):
        manifest = Manifest([record('a0', 'A', 0.0, 0.0), record('a1', 'A', 700.0, 40.0)])
        with self.assertLogs('evaluation.protocols', level='WARNING'):
            report = evaluate_intra(manifest, ['a0', 'a1'], [E0, E1], EvalConfig())
        self.assertNotIn('recall@1', report.metrics())
        self.assertEqual(report.value('intra', 'A', 'queries_with_positive'), 0)
        self.assertEqual(report.curve, [])

    def test_inter_relocalization(self):
        manifest = Manifest([
            record('a0', 'A', 0.0, 0.0), record('a1', 'A', 10.0, 50.0),
            record('b0', 'B', 0.0, 0.5), record('b1', 'B', 10.0, 50.5), record('b2', 'B', 20.0, 200.0),
        ])
        ids, matrix = ['a0', 'a1', 'b0', 'b1', 'b2'], [E0, E2, E0, E1, E2]
        report = evaluate_inter(manifest, ids, matrix, EvalConfig())
        self.assertEqual(report.value('inter', 'A->B', 'recall@1'), 0.5)
        self.assertAlmostEqual(report.value('inter', 'A->B', 'mrr'), 2 / 3)
        self.assertEqual(report.value('inter', 'B->A', 'queries_with_positive'), 2)
        self.assertAlmostEqual(report.value('inter', 'B->A', 'mrr'), 0.75)
        self.assertAlmostEqual(report.value('inter', 'mean', 'mrr'), (2 / 3 + 0.75) / 2)
        self.assertEqual(report.value('inter', 'mean', 'recall@1'), 0.5)

        only_a = evaluate_inter(manifest, ids, matrix, EvalConfig(), query_sequences=['A'])
        self.assertEqual({row['pair'] for row in only_a.rows}, {'A->B', 'mean'})

    def test_inter_needs_two_sequences(self):
        manifest = Manifest([record('a0', 'A', 0.0, 0.0), record('a1', 'A', 10.0, 5.0)])
        with self.assertRaises(DatasetError):
            evaluate_inter(manifest, ['a0', 'a1'], [E0, E1], EvalConfig())

    def test_missing_descriptor(self):
        manifest = Manifest([record('a0', 'A', 0.0, 0.0), record('a1', 'A', 10.0, 5.0)])
        with self.assertRaisesRegex(DatasetError, 'a1'):
            evaluate_intra(manifest, ['a0'], [E0], EvalConfig())

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            EvalConfig(success_radius=0)
        with self.assertRaises(ConfigError):
            EvalConfig(recall_ns=(0, 1))
        self.assertEqual(EvalConfig(radii=[2, 4]).to_dict()['radii'], [2.0, 4.0])


class ReportWriterTests(SimpleTestCase):

    def test_rows_and_curve(self):
        report = EvalReport()
        report.add('intra', 'A', 'queries', 4)
        report.add('intra', 'A', 'recall@1', 0.75)
        report.add_curve_point('intra', 'A', 1.0, 0.5, 2)
        with tempfile.TemporaryDirectory() as tmp:
            rows = read_csv(write_report(report, Path(tmp) / 'report.csv'))
            curve = read_csv(write_curve(report, Path(tmp) / 'curve.csv'))
        self.assertEqual(rows, [
            {'protocol': 'intra', 'pair': 'A', 'metric': 'queries', 'value': '4'},
            {'protocol': 'intra', 'pair': 'A', 'metric': 'recall@1', 'value': '0.75'},
        ])
        self.assertEqual(curve, [{'protocol': 'intra', 'pair': 'A', 'radius': '1.0', 'recall_at_1': '0.5', 'queries': '2'}])

    def test_missing_value(self):
        with self.assertRaises(KeyError):
            EvalReport().value('intra', 'A', 'mrr')


class JobsIndependenceTests(SimpleTestCase):

    SMALL_SCENE = ['synth.extent=40', 'synth.loop_radius=8', 'synth.submap_radius=10', 'synth.tree_density=0.01',
                   'synth.ground_density=0.5', 'synth.understory_density=0.1']

    def test_extract_and_eval_outputs_do_not_depend_on_jobs(self):
        toy = ['--config', str(settings.BASE_DIR / 'configs' / 'toy.json')]
        for override in self.SMALL_SCENE:
            toy += ['--set', override]
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            call_command('synth', *toy, '--out', str(root / 'data'), stdout=StringIO())
            manifest = str(root / 'data' / 'manifest.jsonl')
            model = save_params(DescriptorModel.initialize(BackboneConfig.from_preset('toy'), HeadConfig(dim=256)),
                                root / 'model.bin')
            outputs = {}
            for jobs in ('1', '8'):
                descriptors, report = root / f'descriptors_{jobs}.bin', root / f'report_{jobs}.csv'
                call_command('extract', *toy, '--jobs', jobs, '--manifest', manifest, '--model', str(model),
                             '--out', str(descriptors), stdout=StringIO())
                call_command('eval', *toy, '--jobs', jobs, '--descriptors', str(descriptors), '--manifest', manifest,
                             '--out', str(report), stdout=StringIO())
                outputs[jobs] = (descriptors.read_bytes(), report.read_bytes(),
                                 (root / f'report_{jobs}_radius.csv').read_bytes())
        self.assertEqual(outputs['1'], outputs['8'])
        self.assertGreater(len(outputs['1'][0]), 30 * 256 * 4)
