import itertools

import numpy as np
import pytest

from cmdret import characters as ch
from cmdret.tensorio import FaceTrack


def _unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def reference_clusters(X, threshold):
    """Exhaustive-merge average linkage: recompute every cluster-pair mean distance from scratch."""
    D = 1.0 - X @ X.T
    clusters = [[i] for i in range(len(X))]
    while len(clusters) > 1:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                d = np.mean([D[i, j] for i in clusters[a] for j in clusters[b]])
                if best is None or d < best[0]:
                    best = (d, a, b)
        if best[0] > threshold:
            break
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return sorted(clusters, key=lambda c: c[0])


# bank construction

def test_bank_identical_pair():
    v, w = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    bank = ch.build_bank({"A": np.stack([v, v, w])}, min_cluster=2)
    assert bank.names == ["A"] and bank.cluster_sizes == [2]
    assert np.allclose(bank.embeddings[0], v, atol=1e-15)


def test_bank_orthogonal_rejected():
    assert len(ch.build_bank({"A": np.eye(4)}, min_cluster=2)) == 0


def test_bank_empty_actor_skipped(caplog):
    bank = ch.build_bank({"A": np.zeros((0, 3)), "B": np.tile([1.0, 0, 0], (3, 1))}, min_cluster=3)
    assert bank.names == ["B"] and "no face embeddings" in caplog.text


def test_bank_noisy_copies_with_distractor():
    rng = np.random.default_rng(0)
    base = _unit_rows(rng.standard_normal((1, 32)))[0]
    distract = _unit_rows(rng.standard_normal((1, 32)))[0]
    X = _unit_rows(np.concatenate([base + 0.15 * rng.standard_normal((50, 32)) / np.sqrt(32),
                                   distract + 0.15 * rng.standard_normal((10, 32)) / np.sqrt(32)]))
    bank = ch.build_bank({"A": X})
    largest = max(reference_clusters(X, 0.76), key=len)
    assert bank.cluster_sizes == [len(largest)]
    assert np.allclose(bank.embeddings[0], _unit_rows(X[largest].mean(0, keepdims=True))[0], atol=1e-12)
    assert float(bank.embeddings[0] @ base) >= 0.99


def _small_instances():
    rng = np.random.default_rng(42)
    for n in range(1, 13):
        for rep in range(15):
            k = int(rng.integers(1, 4))
            centers = _unit_rows(rng.standard_normal((k, 6)))
            X = centers[rng.integers(0, k, n)] + rng.uniform(0.1, 0.8) * rng.standard_normal((n, 6))
            yield _unit_rows(X)
    # exact ties: rows drawn from coordinate axes
    for n in range(2, 13):
        yield np.eye(4)[rng.integers(0, 4, n)]


def test_average_linkage_matches_reference():
    for X in _small_instances():
        for t in (0.3, 0.76, 1.2):
            assert ch.average_linkage(X, t) == reference_clusters(X, t)


def test_average_linkage_matches_scipy():
    hierarchy = pytest.importorskip("scipy.cluster.hierarchy")
    rng = np.random.default_rng(9)
    for _ in range(40):
        n = int(rng.integers(2, 40))
        X = _unit_rows(rng.standard_normal((n, 6)) + 1.5 * rng.standard_normal((3, 6))[rng.integers(0, 3, n)])
        Z = hierarchy.linkage(X, method="average", metric="cosine")
        labels = hierarchy.fcluster(Z, t=0.76, criterion="distance")
        expect = sorted((sorted(np.flatnonzero(labels == k).tolist()) for k in set(labels)), key=lambda c: c[0])
        assert ch.average_linkage(X, 0.76) == expect


def test_average_linkage_permutation_invariant():
    rng = np.random.default_rng(7)
    for _ in range(30):
        X = _unit_rows(rng.standard_normal((12, 5)) + np.repeat(rng.standard_normal((3, 5)), 4, axis=0))
        perm = rng.permutation(12)
        a = {tuple(c) for c in ch.average_linkage(X, 0.76)}
        b = {tuple(sorted(perm[i] for i in c)) for c in ch.average_linkage(X[perm], 0.76)}
        assert a == b


def test_bank_min_cluster_invariant():
    rng = np.random.default_rng(3)
    imgs = {f"a{k}": _unit_rows(rng.standard_normal((int(rng.integers(5, 60)), 4)) + 3 * np.eye(4)[k % 4])
            for k in range(8)}
    bank = ch.build_bank(imgs)
    assert all(s >= 30 for s in bank.cluster_sizes)


def test_bank_save_load(tmp_path):
    bank = ch.build_bank({"A": np.tile([0.6, 0.8], (3, 1)), "B": np.tile([1.0, 0.0], (4, 1))}, min_cluster=2)
    bank.save(tmp_path)
    back = ch.CharacterBank.load(tmp_path)
    assert back.names == bank.names and back.cluster_sizes == bank.cluster_sizes
    assert np.allclose(back.embeddings, bank.embeddings, atol=1e-7)


# track linking

def _det(frame, box, emb):
    return ch.DetectionRecord(frame, box, np.asarray(emb, dtype=float))


def test_link_identical():
    e = [1.0, 0.0]
    tracks = ch.link_tracks([_det(0, (0, 0, 10, 10), e), _det(1, (0, 0, 10, 10), e)])
    assert len(tracks) == 1 and tracks[0].length == 2


def test_link_disjoint_orthogonal():
    tracks = ch.link_tracks([_det(0, (0, 0, 10, 10), [1.0, 0.0]), _det(1, (50, 50, 10, 10), [0.0, 1.0])])
    assert [t.length for t in tracks] == [1, 1]


def test_link_empty():
    assert ch.link_tracks([]) == []


def test_link_only_consecutive_frames():
    e = [1.0, 0.0]
    tracks = ch.link_tracks([_det(0, (0, 0, 10, 10), e), _det(2, (0, 0, 10, 10), e)])
    assert len(tracks) == 2


def test_iou():
    assert ch.iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1 / 7)
    assert ch.iou((0, 0, 1, 1), (5, 5, 1, 1)) == 0.0


def _best_matching(prev, cur, threshold=0.5):
    """Exhaustive optimal one-to-one matching of one frame pair, over pairs scoring >= threshold."""
    def s(a, b):
        return 0.5 * ch.iou(a.box, b.box) + 0.5 * float(ch._unit(a.embedding) @ ch._unit(b.embedding))
    best, best_pairs = -1.0, None
    for k in range(0, min(len(prev), len(cur)) + 1):
        for ps in itertools.permutations(range(len(prev)), k):
            for cs in itertools.combinations(range(len(cur)), k):
                pairs = list(zip(ps, cs))
                if any(s(prev[p], cur[c]) < threshold for p, c in pairs):
                    continue
                tot = sum(s(prev[p], cur[c]) for p, c in pairs)
                if tot > best + 1e-12:
                    best, best_pairs = tot, set(pairs)
    return best_pairs


@pytest.mark.parametrize("seed", range(10))
def test_link_interleaved_matches_bipartite_oracle(seed):
    rng = np.random.default_rng(seed)
    ids = _unit_rows(rng.standard_normal((2, 8)))
    frames = []
    pos = np.array([[0.0, 0.0], [14.0, 0.0]])
    for f in range(10):
        pos = pos + rng.uniform(-2, 2, (2, 2))
        order = rng.permutation(2)  # interleave the listing order within each frame
        frames.append([_det(f, (pos[k, 0], pos[k, 1], 12, 12), ids[k] + 0.2 * rng.standard_normal(8))
                       for k in order])
    dets = [d for fr in frames for d in fr]
    tracks = ch.link_tracks(dets)
    # oracle: chain frames with the optimal per-frame matching
    track_of = {i: i for i in range(len(frames[0]))}  # detection index in current frame -> chain id
    lengths = [1] * len(frames[0])
    for f in range(1, 10):
        match = {c: p for p, c in _best_matching(frames[f - 1], frames[f])}
        nxt = {}
        for c in range(len(frames[f])):
            if c in match:
                nxt[c] = track_of[match[c]]
                lengths[nxt[c]] += 1
            else:
                nxt[c] = len(lengths)
                lengths.append(1)
        track_of = nxt
    expect = sorted(lengths)
    assert sorted(t.length for t in tracks) == expect == [10, 10]


# labeling

def _bank(rows):
    rows = np.asarray(rows, dtype=float)
    return ch.CharacterBank([f"a{k}" for k in range(len(rows))], rows, [30] * len(rows))


def _track(emb, actor=None):
    return FaceTrack(0, actor, 5, np.asarray(emb, dtype=float))


def test_label_examples():
    bank = _bank([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = ch.label_tracks([_track([0.0, 1.0, 0.0]), _track([0.0, 0.0, 1.0]), _track([0.8, 0.6, 0.0])], bank)
    assert [t.actor for t in out] == [1, None, 0]  # last one sits exactly on the 0.8 boundary


def test_label_empty_bank():
    assert [t.actor for t in ch.label_tracks([_track([1.0, 0.0], 3)], ch.CharacterBank())] == [None]


def test_label_with_cast_indices():
    bank = _bank([[1.0, 0.0], [0.0, 1.0]])
    out = ch.label_tracks([_track([0.0, 1.0]), _track([1.0, 0.0])], bank, cast=["x", "a1"])
    assert [t.actor for t in out] == [1, None]


def test_label_planted_precision():
    rng = np.random.default_rng(5)
    Q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    bank = _bank(Q[:10])
    tracks, truth = [], []
    for _ in range(200):
        k = int(rng.integers(10))
        noise = rng.standard_normal(16)
        noise -= (noise @ Q[k]) * Q[k]
        emb = Q[k] + 0.3 * noise / np.linalg.norm(noise)  # cosine to own entry 1/sqrt(1.09) > 0.8
        tracks.append(_track(emb / np.linalg.norm(emb)))
        truth.append(k)
    assert [t.actor for t in ch.label_tracks(tracks, bank)] == truth


# identity vectors

def test_query_vectors(caplog):
    cast = ["A", "B", "C"]
    assert list(ch.encode_query_chars(["A", "C"], cast)) == [1, 0, 1]
    assert list(ch.encode_query_chars([], cast)) == [0, 0, 0]
    assert list(ch.encode_query_chars(["A", "a"], cast)) == [1, 0, 0]
    assert list(ch.encode_query_chars(["Zed"], cast)) == [0, 0, 0] and "not in cast" in caplog.text
    with pytest.raises(ValueError):
        ch.encode_query_chars(["A"], [])


def test_find_mentions():
    assert ch.find_mentions("alice meets Bob; Alicea waves", ["Alice", "Bob", "Carl"]) == ["Alice", "Bob"]


def _tracks(spec):
    return [FaceTrack(k, a, length, np.ones(2) / np.sqrt(2)) for k, (a, length) in enumerate(spec)]


def test_video_vectors():
    tr = _tracks([(0, 30), (0, 10), (1, 20)])
    assert np.allclose(ch.encode_video_chars(tr, 3, "track-frequency"), [2 / 3, 1 / 3, 0], atol=0)
    assert np.allclose(ch.encode_video_chars(tr, 3, "track-length"), [40 / 60, 20 / 60, 0], atol=0)
    assert np.allclose(ch.encode_video_chars(tr, 3, "track-length"), [2 / 3, 1 / 3, 0], atol=0)
    assert list(ch.encode_video_chars(tr, 3, "one-hot")) == [1, 1, 0]
    assert list(ch.encode_video_chars([], 3, "track-length")) == [0, 0, 0]
    assert list(ch.encode_video_chars(_tracks([(None, 5)]), 2, "track-frequency")) == [0, 0]
    with pytest.raises(ValueError):
        ch.encode_video_chars(tr, 3, "bogus")


def test_track_length_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 6))
        spec = [(int(rng.integers(0, 4)) if rng.random() > 0.2 else None, int(rng.integers(1, 90)))
                for _ in range(n)]
        x = ch.encode_video_chars(_tracks(spec), 4, "track-length")
        labeled = any(a is not None for a, _ in spec)
        assert abs(x.sum() - (1.0 if labeled else 0.0)) < 1e-15


def test_char_similarity():
    assert ch.char_similarity([1, 0, 1], [0.5, 0.5, 0]) == 0.5
    assert ch.char_similarity([1, 0, 1], [0, 0, 0]) == 0
    assert ch.char_similarity([1, 0, 0], [1, 0, 0]) == 1
    with pytest.raises(ValueError):
        ch.char_similarity([1, 0], [1, 0, 0])


def coinciding_family(rng, cast_size=6, gallery=8, tracks_per_clip=None):
    """Each actor in at most one track per clip, all tracks the same length."""
    clips = []
    for _ in range(gallery):
        n = tracks_per_clip or int(rng.integers(1, cast_size + 1))
        actors = rng.choice(cast_size, size=n, replace=False)
        clips.append(_tracks([(int(a), 25) for a in actors]))
    return clips


def variant_argmax(y, gallery, cast_size):
    return {v: int(np.argmax([ch.char_similarity(y, ch.encode_video_chars(g, cast_size, v)) for g in gallery]))
            for v in ch.VARIANTS}


def test_frequency_equals_length_on_family():
    rng = np.random.default_rng(1)
    for _ in range(200):
        for g in coinciding_family(rng):
            assert np.array_equal(ch.encode_video_chars(g, 6, "track-frequency"),
                                  ch.encode_video_chars(g, 6, "track-length"))


def test_variants_share_argmax_equal_track_counts():
    rng = np.random.default_rng(2)
    for _ in range(300):
        gallery = coinciding_family(rng, tracks_per_clip=int(rng.integers(1, 7)))
        y = (rng.random(6) < 0.4).astype(float)
        assert len(set(variant_argmax(y, gallery, 6).values())) == 1


def test_one_hot_diverges_when_track_counts_differ():
    # normalized variants divide by the clip's track count; presence bits do not
    gallery = [_tracks([(0, 10), (1, 10), (2, 10)]), _tracks([(0, 10)])]
    am = variant_argmax(np.array([1.0, 1.0, 0.0]), gallery, 3)
    assert am == {"one-hot": 0, "track-frequency": 1, "track-length": 1}
