import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmdret.tensorio import (ABSENT, FeatureTensor, ManifestError, SynthSpec, TensorFormatError, generate_synth,
                             load_manifest, parse_tensor, planted_codes, read_tensor, tensor_bytes, write_dataset,
                             write_tensor)


def test_round_trip_2x3(tmp_path):
    t = FeatureTensor(np.arange(1, 7, dtype=np.float32).reshape(2, 3))
    write_tensor(tmp_path / "t.cmdt", t)
    assert read_tensor(tmp_path / "t.cmdt") == t


def test_header_layout():
    buf = tensor_bytes(FeatureTensor(np.ones((2, 3))))
    assert buf[:4] == b"CMDT" and buf[4] == 1 and buf[5] == 0
    assert struct.unpack("<3I", buf[6:18]) == (2, 2, 3)
    assert len(buf) == 18 + 6 * 4


def test_bad_magic():
    buf = b"XXXX" + tensor_bytes(FeatureTensor(np.ones(2)))[4:]
    with pytest.raises(TensorFormatError, match="bad magic"):
        parse_tensor(buf)


def test_shape_data_mismatch():
    buf = b"CMDT" + bytes([1, 0]) + struct.pack("<3I", 2, 2, 2) + struct.pack("<3f", 1, 2, 3)
    with pytest.raises(TensorFormatError, match="shape-data mismatch"):
        parse_tensor(buf)


@pytest.mark.parametrize("cut", [5, 8, 12, 19])
def test_truncated(cut):
    buf = tensor_bytes(FeatureTensor(np.ones((2, 2))))
    with pytest.raises(TensorFormatError):
        parse_tensor(buf[:cut])


def test_zero_dimension_rejected():
    with pytest.raises(TensorFormatError):
        FeatureTensor(np.zeros((0, 3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=1, max_size=3).map(tuple),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_property(a):
    t = FeatureTensor(a)
    back = parse_tensor(tensor_bytes(t))
    assert back == t
    assert back.array.tobytes() == a.astype("<f4").tobytes()


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def _tiny_records(tmp_path, n_movies=2, n_clips=3):
    write_tensor(tmp_path / "f.cmdt", np.ones((2, 3)))
    write_tensor(tmp_path / "t.cmdt", np.ones((2, 4)))
    recs = [{"kind": "text", "dim": 4}, {"kind": "expert", "name": "scene", "dim": 3}]
    for m in range(n_movies):
        recs.append({"kind": "movie", "movie_id": f"m{m}", "cast": ["A", "B"]})
        for c in range(n_clips):
            recs.append({"kind": "clip", "movie_id": f"m{m}", "clip_index": c,
                         "experts": {"scene": "f.cmdt"}, "description_tokens": "t.cmdt"})
    recs += [{"kind": "split", "split": "train", "movie_id": f"m{m}"} for m in range(n_movies)]
    return recs


def test_manifest_counts(tmp_path):
    _write_lines(tmp_path / "man.jsonl", _tiny_records(tmp_path))
    man = load_manifest(tmp_path / "man.jsonl")
    assert len(man.clips) == 6 and len(man.movies) == 2
    assert [c.key for c in man.clips] == sorted(c.key for c in man.clips)


def test_manifest_dangling_movie(tmp_path):
    recs = _tiny_records(tmp_path)
    recs.insert(3, {"kind": "clip", "movie_id": "m9", "clip_index": 0, "experts": {"scene": "f.cmdt"},
                    "description_tokens": "t.cmdt"})
    _write_lines(tmp_path / "man.jsonl", recs)
    with pytest.raises(ManifestError, match="m9"):
        load_manifest(tmp_path / "man.jsonl")


def test_manifest_split_conflict(tmp_path):
    recs = _tiny_records(tmp_path) + [{"kind": "split", "split": "test", "movie_id": "m0"}]
    _write_lines(tmp_path / "man.jsonl", recs)
    with pytest.raises(ManifestError, match="split conflict"):
        load_manifest(tmp_path / "man.jsonl")


def test_manifest_duplicate_clip_index(tmp_path):
    recs = _tiny_records(tmp_path)
    recs.append({"kind": "clip", "movie_id": "m0", "clip_index": 1, "experts": {"scene": "f.cmdt"},
                 "description_tokens": "t.cmdt"})
    _write_lines(tmp_path / "man.jsonl", recs)
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "man.jsonl")


def test_manifest_absent_expert_is_explicit(tmp_path):
    recs = _tiny_records(tmp_path, 1, 1)
    recs[3]["experts"] = {"scene": None}
    _write_lines(tmp_path / "man.jsonl", recs)
    clip = load_manifest(tmp_path / "man.jsonl").clips[0]
    assert clip.expert_features["scene"] is ABSENT


def test_synth_count():
    assert len(generate_synth(SynthSpec(n_movies=5, clips_per_movie=4)).clips) == 20


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        generate_synth(SynthSpec(n_movies=0))
    with pytest.raises(ValueError):
        generate_synth(SynthSpec(expert_dims={}))


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(seed=11, missing_rate=0.3)
    write_dataset(generate_synth(spec), tmp_path / "a")
    write_dataset(generate_synth(spec), tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") != {}


def test_synth_write_load_round_trip(tmp_path):
    man = generate_synth(SynthSpec(seed=2, missing_rate=0.4))
    back = load_manifest(write_dataset(man, tmp_path))
    assert [c.key for c in back.clips] == [c.key for c in man.clips]
    for a, b in zip(man.clips, back.clips):
        assert a.description_tokens == b.description_tokens
        for e in man.experts:
            fa, fb = a.expert_features[e], b.expert_features[e]
            assert (fa is ABSENT and fb is ABSENT) or fa == fb
        assert [t.actor for t in a.face_tracks] == [t.actor for t in b.face_tracks]
    assert back.splits == man.splits


def test_splits_disjoint_and_cover():
    man = generate_synth(SynthSpec(n_movies=7))
    movies = [m for s in ("train", "val", "test") for m in man.split_movies(s)]
    assert sorted(movies) == sorted(man.movies)


@pytest.mark.parametrize("seed", range(5))
def test_planted_code_nearest_neighbor(seed):
    # brute-force cosine NN over all 20 clips on the recovered codes
    spec = SynthSpec(seed=seed, snr=100.0)
    text, video = planted_codes(generate_synth(spec), spec)
    tn = text / np.linalg.norm(text, axis=1, keepdims=True)
    vn = video / np.linalg.norm(video, axis=1, keepdims=True)
    hits = 0
    for q in range(len(tn)):
        best = max(range(len(vn)), key=lambda g: float(tn[q] @ vn[g]))
        hits += best == q
    assert hits == len(tn) == 20


def test_noiseless_description_closest_to_own_clip():
    spec = SynthSpec(seed=4, snr=math.inf)
    man = generate_synth(spec)
    text, video = planted_codes(man, spec)
    latents = np.stack([c.latent for c in man.clips])
    assert np.allclose(text, latents, atol=1e-5) and np.allclose(video, latents, atol=1e-5)


def test_mentions_consistent_with_tracks():
    for c in generate_synth(SynthSpec(seed=5)).clips:
        assert set(c.mentioned_actors) <= {t.actor for t in c.face_tracks}
