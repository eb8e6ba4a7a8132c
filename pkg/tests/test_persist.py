import json

import numpy as np
import pytest

from droidzero.errors import FormatError
from droidzero.persist import (
    atomic_output, atomic_write_text, dump_embeddings, dump_verdicts, load_snn, load_vgae,
    read_embeddings, read_verdicts, save_snn, save_vgae,
)
from droidzero.snn import SnnModel
from droidzero.vgae import Embedding, VgaeModel
from droidzero.zeroshot import Verdict


@pytest.mark.parametrize("encoding", ["decimal", "base64"])
def test_vgae_round_trip(tmp_path, encoding):
    m = VgaeModel.init(7, np.random.default_rng(0), vocab_hash="abc")
    save_vgae(tmp_path / "v.json", m, encoding)
    back = load_vgae(tmp_path / "v.json", "abc")
    for k, v in m.params.items():
        assert np.array_equal(back.params[k], v)
    assert back.vocab_size == 7


def test_vgae_hash_mismatch(tmp_path):
    save_vgae(tmp_path / "v.json", VgaeModel.init(4, np.random.default_rng(0), vocab_hash="abc"))
    with pytest.raises(FormatError):
        load_vgae(tmp_path / "v.json", "xyz")


def test_wrong_kind_and_version(tmp_path):
    save_snn(tmp_path / "s.json", SnnModel.init(np.random.default_rng(0)))
    with pytest.raises(FormatError):
        load_vgae(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    doc["version"] = 99
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_snn(tmp_path / "s.json")


@pytest.mark.parametrize("encoding", ["decimal", "base64"])
def test_snn_round_trip_keeps_sharing(tmp_path, encoding):
    m = SnnModel.init(np.random.default_rng(1))
    save_snn(tmp_path / "s.json", m, encoding)
    back = load_snn(tmp_path / "s.json")
    assert back.twins[0] is back.twins[1]
    for k, v in m.params.items():
        assert np.array_equal(back.params[k], v)


def test_save_is_byte_stable(tmp_path):
    m = SnnModel.init(np.random.default_rng(2))
    save_snn(tmp_path / "a.json", m)
    save_snn(tmp_path / "b.json", m)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_embeddings_round_trip(tmp_path):
    embs = [Embedding(np.random.default_rng(3).normal(size=16), "a", "benign"),
            Embedding(np.zeros(16), "b", "malware", "f")]
    (tmp_path / "e.jsonl").write_text(dump_embeddings(embs, {"vocab_hash": "h"}))
    meta, back = read_embeddings(tmp_path / "e.jsonl")
    assert meta["vocab_hash"] == "h"
    assert [e.app_id for e in back] == ["a", "b"] and back[1].family == "f"
    assert np.array_equal(back[0].vector, embs[0].vector)


def test_verdicts_round_trip(tmp_path):
    vs = [Verdict("a", "benign", 0.7, 0.5, "zero-shot"), Verdict("b", "malware", 0.2, None, "few-shot", 0.6, ["f"])]
    (tmp_path / "v.jsonl").write_text(dump_verdicts(vs, {"mode": "zero-shot"}))
    meta, back = read_verdicts(tmp_path / "v.jsonl")
    assert back == vs and meta["mode"] == "zero-shot"


def test_atomic_output_leaves_no_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_output(target) as tmp:
            open(tmp, "w").write("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
    atomic_write_text(target, "done\n")
    assert target.read_text() == "done\n"
