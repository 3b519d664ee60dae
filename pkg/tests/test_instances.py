import json
import os
import shutil
import unittest

import numpy as np

from dextra.dcopf import DcOpfInstance
from dextra.instances import DATA_ENV, as_problem_spec, data_path, \
    load_instance, random_instance, resolve_instance, write_instance
from dextra.problem import InvalidInstanceError, ProblemSpec


class TestResolveInstance(unittest.TestCase):

    _test_dir = 'test_tmp_dir'

    def setUp(self):
        os.mkdir(self._test_dir)
        self._environ = os.environ.get(DATA_ENV)
        os.environ.pop(DATA_ENV, None)

    def tearDown(self):
        shutil.rmtree(self._test_dir)
        if self._environ is not None:
            os.environ[DATA_ENV] = self._environ
        else:
            os.environ.pop(DATA_ENV, None)

    def _write(self, filename, content):
        path = os.path.join(self._test_dir, filename)
        with open(path, 'w') as f:
            f.write(content)
        return path

    def test_bundledTiny(self):
        instance, path = resolve_instance('tiny2')
        self.assertIsInstance(instance, ProblemSpec)
        self.assertEqual(instance.name, 'tiny2')
        self.assertEqual(path, data_path('tiny2'))

    def test_bundledDcOpf(self):
        instance, _ = resolve_instance('sixbus_synthetic')
        self.assertIsInstance(instance, DcOpfInstance)
        spec, dcopf = as_problem_spec(instance)
        self.assertIs(dcopf, instance)
        self.assertEqual(spec.l, 6)

    def test_asProblemSpecKeepsSpec(self):
        instance, _ = resolve_instance('tiny2')
        spec, dcopf = as_problem_spec(instance)
        self.assertIs(spec, instance)
        self.assertIsNone(dcopf)

    def test_randomInstanceIsGenerated(self):
        instance, path = resolve_instance('random_seed7')
        self.assertIsNone(path)
        self.assertEqual(instance.name, 'random_seed7')
        self.assertEqual(instance.validate(), [])

    def test_externalInstanceMissing(self):
        with self.assertRaises(FileNotFoundError):
            resolve_instance('sixbus')

    def test_dataDirectoryOverride(self):
        with open(data_path('tiny2')) as f:
            record = json.load(f)
        record['name'] = 'sixbus'
        self._write('sixbus.json', json.dumps(record))
        os.environ[DATA_ENV] = self._test_dir
        instance, path = resolve_instance('sixbus')
        self.assertEqual(instance.name, 'sixbus')
        self.assertEqual(os.path.dirname(str(path)), self._test_dir)

    def test_dataDirectoryFallsBackToBundled(self):
        os.environ[DATA_ENV] = self._test_dir
        _, path = resolve_instance('tiny2')
        self.assertNotEqual(os.path.dirname(str(path)), self._test_dir)

    def test_filePath(self):
        path = self._write('inst.json', open(data_path('tiny2')).read())
        instance, resolved = resolve_instance(path)
        self.assertEqual(str(resolved), path)
        self.assertEqual(instance.l, 2)

    def test_missingFile(self):
        with self.assertRaises(FileNotFoundError):
            resolve_instance(os.path.join(self._test_dir, 'none.json'))

    def test_malformedJson(self):
        path = self._write('broken.json', '{"agents": [')
        with self.assertRaises(InvalidInstanceError):
            load_instance(path)

    def test_unknownFormat(self):
        path = self._write('other.json', '{"foo": 1}')
        with self.assertRaises(InvalidInstanceError):
            load_instance(path)

    def test_notJson(self):
        path = self._write('inst.txt', 'agents')
        with self.assertRaises(InvalidInstanceError):
            load_instance(path)

    def test_notADocument(self):
        with self.assertRaises(InvalidInstanceError):
            load_instance(self._write('list.json', '[1, 2]'))

    def test_invalidInstance(self):
        with open(data_path('tiny2')) as f:
            record = json.load(f)
        record['graph']['edges'] = []
        with self.assertRaises(InvalidInstanceError):
            load_instance(record)

    def test_missingKey(self):
        with open(data_path('tiny2')) as f:
            record = json.load(f)
        del record['graph']
        with self.assertRaises(InvalidInstanceError):
            load_instance(record)

    def test_writeInstance(self):
        path = os.path.join(self._test_dir, 'random.json')
        instance = random_instance(3)
        write_instance(instance, path)
        other = load_instance(path)
        self.assertDictEqual(other.to_dict(), instance.to_dict())


class TestRandomInstance(unittest.TestCase):

    def test_deterministic(self):
        self.assertDictEqual(random_instance(11).to_dict(),
                             random_instance(11).to_dict())

    def test_seedsDiffer(self):
        self.assertNotEqual(random_instance(1).to_dict(),
                            random_instance(2).to_dict())

    def test_numberOfAgents(self):
        self.assertEqual(random_instance(0, n_agents=5).l, 5)
        for seed in range(10):
            self.assertIn(random_instance(seed).l, range(2, 7))

    def test_validAndConnected(self):
        for seed in range(10):
            spec = random_instance(seed)
            self.assertEqual(spec.validate(), [])
            self.assertTrue(spec.graph.is_connected)

    def test_objectivesAreConvex(self):
        for agent in random_instance(4).agents:
            self.assertGreater(np.linalg.eigvalsh(agent.objective.Q).min(), 0.)
