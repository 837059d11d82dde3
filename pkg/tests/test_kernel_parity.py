"""Cross-implementation parity with the packed hamming kernel.

Skipped wholesale when the kernel library has not been built; the whole
primary suite stands on its own without it.
"""

import subprocess

import numpy as np
import pytest

from darkhash import evaluation as ev
from darkhash import hashspace as hs
from darkhash.kernel import KernelEvaluator, find_kernel_library

LIB = find_kernel_library()
pytestmark = pytest.mark.skipif(LIB is None, reason="hamming kernel not built")


@pytest.fixture(scope="module")
def kernel():
    return KernelEvaluator.load()


def random_db(rng, n, k, n_classes=4, constant_codes=False):
    if constant_codes:
        codes = np.tile(rng.choice([-1, 1], size=k).astype(np.int8), (n, 1))
    else:
        codes = rng.choice([-1, 1], size=(n, k)).astype(np.int8)
    labels = np.zeros((n, n_classes), dtype=np.uint8)
    labels[np.arange(n), rng.integers(0, n_classes, size=n)] = 1
    labels |= (rng.random((n, n_classes)) < 0.2).astype(np.uint8)
    return hs.CodeDatabase(codes=codes, labels=labels)


def packed_query_bytes(code):
    return np.packbits((code > 0).astype(np.uint8), bitorder="little").tobytes()


class TestPackParity:
    def test_pack_matches_python_writer(self, kernel):
        rng = np.random.default_rng(0)
        for k, l in ((8, 1), (13, 5), (64, 3), (65, 9)):
            db = random_db(rng, 17, k, l)
            assert kernel.pack(db.codes, db.labels) == hs.dhc1_bytes(db)

    def test_python_written_file_read_back_by_kernel_cli(self, kernel, tmp_path):
        rng = np.random.default_rng(1)
        db = random_db(rng, 12, 16)
        hs.write_dhc1(db, tmp_path / "db.dhc")
        hs.write_dhc1(db, tmp_path / "q.dhc")
        exe = LIB.parent / "hamming-kernel"
        if not exe.exists():
            pytest.skip("CLI binary not built")
        out = subprocess.run(
            [str(exe), "map", "--queries", str(tmp_path / "q.dhc"),
             "--db", str(tmp_path / "db.dhc")],
            capture_output=True, text=True, check=True)
        got = float(out.stdout.strip())
        expect = ev.map_from_codes(db.codes, db.labels, db)
        assert abs(got - expect) < 1e-12


class TestRankParity:
    def test_rank_matches_reference(self, kernel):
        rng = np.random.default_rng(2)
        for trial in range(30):
            k = (4, 8, 16, 64)[trial % 4]
            db = random_db(rng, 40, k)
            q = rng.choice([-1, 1], size=k).astype(np.int8)
            got = kernel.rank(hs.dhc1_bytes(db), packed_query_bytes(q), len(db))
            assert got.tolist() == hs.rank_database(q, db).tolist()

    def test_topk_prefix(self, kernel):
        rng = np.random.default_rng(3)
        db = random_db(rng, 25, 16)
        q = rng.choice([-1, 1], size=16).astype(np.int8)
        blob = hs.dhc1_bytes(db)
        full = kernel.rank(blob, packed_query_bytes(q), 25)
        top5 = kernel.topk(blob, packed_query_bytes(q), 5)
        assert top5.tolist() == full[:5].tolist()

    def test_tie_rule_on_constant_codes(self, kernel):
        rng = np.random.default_rng(4)
        db = random_db(rng, 30, 8, constant_codes=True)
        q = rng.choice([-1, 1], size=8).astype(np.int8)
        got = kernel.rank(hs.dhc1_bytes(db), packed_query_bytes(q), 30)
        assert got.tolist() == list(range(30))


class TestMapParity:
    def test_100_random_instances(self, kernel):
        rng = np.random.default_rng(5)
        for trial in range(100):
            k = (4, 8, 16, 64)[trial % 4]
            l = 2 + trial % 5
            db = random_db(rng, 30, k, l, constant_codes=(trial % 10 == 0))
            queries = random_db(rng, 6, k, l)
            got = kernel.map(hs.dhc1_bytes(queries), hs.dhc1_bytes(db))
            expect = ev.map_from_codes(queries.codes, queries.labels, db)
            assert abs(got - expect) < 1e-12, f"trial {trial}"

    def test_t_map_instances(self, kernel):
        rng = np.random.default_rng(6)
        for trial in range(30):
            db = random_db(rng, 25, 16, 5)
            queries = random_db(rng, 5, 16, 5)
            target = trial % 5
            got = kernel.map(hs.dhc1_bytes(queries), hs.dhc1_bytes(db),
                             target=target)
            expect = ev.t_map_from_codes(queries.codes, db, target)
            assert abs(got - expect) < 1e-12

    def test_dimension_mismatch_status(self, kernel):
        rng = np.random.default_rng(7)
        db = random_db(rng, 10, 16)
        queries = random_db(rng, 4, 8)
        from darkhash.kernel import KernelCallError

        with pytest.raises(KernelCallError):
            kernel.map(hs.dhc1_bytes(queries), hs.dhc1_bytes(db))

    def test_malformed_blob_status(self, kernel):
        from darkhash.kernel import KernelCallError

        rng = np.random.default_rng(8)
        db = random_db(rng, 10, 16)
        with pytest.raises(KernelCallError):
            kernel.map(b"JUNKJUNKJUNKJUNK", hs.dhc1_bytes(db))
