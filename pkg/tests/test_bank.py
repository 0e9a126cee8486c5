import math
import uuid

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from explicitlm import bank as B
from explicitlm import corpus as C
from explicitlm import numerics as nm
from explicitlm.errors import (
    BoundsError,
    ConfigError,
    DegenerateEntryError,
    FreezeViolationError,
    MagicError,
    TruncatedFileError,
    VersionError,
    VocabularyError,
)


def toy_vocab():
    # ids: pad 0, unk 1, bos 2, then fixed words so the example below holds
    words = ["a", "b", "paris", "d", "france", "f", "capital_of"]
    return C.Vocab(list(C.SPECIALS) + words)


def random_bank(rng, n=16, length=4, vocab_size=12, rho=0.25):
    entries = rng.integers(3, vocab_size, size=(n, length))
    entries[:, -1] = 0
    mask = B.partition(np.arange(n), n, rho)
    uids = [uuid.UUID(bytes=rng.bytes(16), version=4) for _ in range(n)]
    return B.MemoryBank(entries, mask, uids, vocab_size, rho)


# -------------------------------------------------------------- tokenise


def test_tokenize_empty_is_all_pad():
    assert B.tokenize_entry("", toy_vocab(), 8) == [0] * 8


def test_tokenize_worked_example():
    v = toy_vocab()
    assert (v.id("paris"), v.id("capital_of"), v.id("france")) == (5, 9, 7)
    assert B.tokenize_entry("paris capital_of france", v, 8) == [5, 9, 7, 0, 0, 0, 0, 0]


def test_tokenize_truncates():
    assert B.tokenize_entry("a b a b", toy_vocab(), 3) == [3, 4, 3]


def test_tokenize_unknown_word():
    with pytest.raises(VocabularyError, match="'berlin'"):
        B.tokenize_entry("berlin capital_of germany", toy_vocab(), 8)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 9), min_size=0, max_size=6))
def test_tokenize_detokenize_roundtrip(ids):
    v = toy_vocab()
    entry = ids + [0] * (6 - len(ids))
    assert B.tokenize_entry(B.detokenize_entry(entry, v), v, 6) == entry


# ----------------------------------------------------------- embed / pool


def test_embed_all_pad_entry():
    bank = B.MemoryBank(np.zeros((4, 3), dtype=int), np.zeros(4, bool), [uuid.uuid4() for _ in range(4)], 5, 0.0)
    table = nm.Tensor(np.arange(10.0).reshape(5, 2))
    np.testing.assert_array_equal(B.embed_entry(bank, 0, table).data, np.tile(table.data[0][:, None], 3))


def test_embed_one_hot_table():
    rng = np.random.default_rng(0)
    bank = random_bank(rng)
    out = B.embed_entry(bank, 3, nm.Tensor(np.eye(12))).data
    np.testing.assert_array_equal(out, np.eye(12)[:, bank.entries[3]])


def test_embed_direct_lookup():
    rng = np.random.default_rng(1)
    bank = random_bank(rng)
    table = rng.normal(size=(12, 5))
    out = B.embed_entry(bank, 7, nm.Tensor(table)).data
    for j, tok in enumerate(bank.entries[7]):
        np.testing.assert_array_equal(out[:, j], table[tok])


def test_embed_out_of_range():
    with pytest.raises(BoundsError):
        B.embed_entry(random_bank(np.random.default_rng(0)), 16, nm.Tensor(np.eye(12)))


def test_pool_single_and_pair():
    e = nm.Tensor(np.array([[1.0, 3.0, 9.0], [2.0, 4.0, 9.0]]))
    np.testing.assert_allclose(B.pool_entry(e, [False, True, True]).data, [1.0, 2.0])
    np.testing.assert_allclose(B.pool_entry(e, [False, False, True]).data, [2.0, 3.0])


def test_pool_all_pad_is_degenerate():
    with pytest.raises(DegenerateEntryError):
        B.pool_entry(nm.Tensor(np.ones((2, 3))), [True, True, True])


def test_pooling_matrix_matches_masked_mean():
    rng = np.random.default_rng(2)
    bank = random_bank(rng)
    table = rng.normal(size=(12, 6))
    pooled = B.pooling_matrix(bank) @ table
    for i in range(bank.capacity):
        keep = bank.entries[i] != 0
        np.testing.assert_allclose(pooled[i], table[bank.entries[i][keep]].mean(axis=0))


# ------------------------------------------------------------- partition


def test_partition_default_rate():
    assert B.partition(np.arange(1000), 1000, 0.2).sum() == 200


def test_partition_extremes():
    assert not B.partition(np.arange(16), 16, 0.0).any()
    assert B.partition(np.arange(16), 16, 1.0).all()


def test_partition_follows_load_order():
    mask = B.partition([5, 2, 9, 0], 16, 0.125)
    assert list(np.flatnonzero(mask)) == [2, 5]


def test_partition_rejects_bad_rate():
    with pytest.raises(ConfigError):
        B.partition(np.arange(16), 16, 1.5)


def test_build_bank_freezes_curated():
    kg = C.generate_kg(0, 40, 8, 200)
    sp = C.make_splits(kg, 0.25, 64, 50, 0)
    vocab = C.build_vocab([t.surface for t in kg.triplets], C.filler_words())
    bank = B.build_bank([(t.uuid, t.surface) for t in sp.frozen], [(t.uuid, t.surface) for t in sp.updatable],
                        vocab, 64, 8, 0.25, np.random.default_rng(0))
    assert bank.entries.shape == (64, 8)
    assert bank.freeze_mask.sum() == 16
    for t in sp.frozen:
        i = bank.index_of(t.uuid)
        assert bank.freeze_mask[i]
        assert B.detokenize_entry(bank.entries[i], vocab) == t.surface


def test_build_bank_random_init_fills_updatable():
    vocab = C.build_vocab(["x y z w"])
    cur = [(uuid.uuid4(), "x y")] * 4
    bank = B.build_bank(cur, [(uuid.uuid4(), "z w")], vocab, 16, 4, 0.25, np.random.default_rng(0),
                        updatable_init="random")
    assert bank.freeze_mask.sum() == 4
    upd = bank.entries[bank.updatable_indices]
    assert (upd[:, 0] >= 3).all()


def test_content_layout_groups_first_tokens():
    rows = np.array([[5, 7], [6, 7], [5, 8], [6, 8]])
    slots = B.content_layout(rows, 2)
    assert slots[0] // 2 == slots[2] // 2 and slots[1] // 2 == slots[3] // 2
    assert slots[0] % 2 == slots[1] % 2  # second token 7 shares a column


# -------------------------------------------------------------------- EMA


def ema_setup(n=4, d=3, rho=0.25):
    rng = np.random.default_rng(0)
    bank = random_bank(rng, n=n, length=3, vocab_size=10, rho=rho)
    ema = B.EmaState(rng.normal(size=(len(bank.updatable_indices), d)), np.ones(len(bank.updatable_indices)), 0.9)
    return bank, ema


def test_ema_gamma_one_is_identity():
    bank, ema = ema_setup()
    out = B.ema_update(ema, bank, [1, 2], np.ones((2, 3)), decay=1.0)
    np.testing.assert_array_equal(out.shadow, ema.shadow)
    np.testing.assert_array_equal(out.cluster_size, ema.cluster_size)


def test_ema_gamma_zero_is_mean_of_queries():
    bank, ema = ema_setup()
    v, w = np.array([1.0, 2.0, 3.0]), np.array([3.0, 0.0, -1.0])
    out = B.ema_update(ema, bank, [2, 2], np.stack([v, w]), decay=0.0)
    k = list(bank.updatable_indices).index(2)
    np.testing.assert_allclose(out.shadow[k], (v + w) / 2, rtol=1e-5)


def test_ema_two_steps_hand_unrolled():
    bank, ema = ema_setup()
    k = list(bank.updatable_indices).index(3)
    g, eps = 0.9, ema.epsilon
    q1, q2 = np.array([1.0, 0.0, 2.0]), np.array([-1.0, 4.0, 0.5])
    n0, s0 = ema.cluster_size[k], ema.shadow[k] * (ema.cluster_size[k] + eps)
    n1, s1 = g * n0 + 0.1, g * s0 + 0.1 * q1
    n2, s2 = g * n1 + 0.1 * 2, g * s1 + 0.1 * (q1 + q2)
    out = B.ema_update(B.ema_update(ema, bank, [3], q1[None]), bank, [3, 3], np.stack([q1, q2]))
    np.testing.assert_allclose(out.cluster_size[k], n2, rtol=1e-12)
    np.testing.assert_allclose(out.shadow[k], s2 / (n2 + eps), rtol=1e-12)


def test_ema_untouched_decay_counts_only():
    bank, ema = ema_setup()
    out = B.ema_update(ema, bank, [1], np.ones((1, 3)))
    k = list(bank.updatable_indices).index(2)
    np.testing.assert_array_equal(out.shadow[k], ema.shadow[k])
    assert out.cluster_size[k] == pytest.approx(0.9 * ema.cluster_size[k])


def test_ema_frozen_assignment_rejected():
    bank, ema = ema_setup()
    with pytest.raises(FreezeViolationError, match="0"):
        B.ema_update(ema, bank, [0], np.ones((1, 3)))


def test_ema_contracts_geometrically():
    bank, ema = ema_setup()
    v = np.array([2.0, -1.0, 0.5])
    k = list(bank.updatable_indices).index(1)
    err0 = np.linalg.norm(ema.shadow[k] - v)
    steps = math.ceil(math.log(0.5) / math.log(0.9))
    for _ in range(steps):
        ema = B.ema_update(ema, bank, [1], v[None])
    assert np.linalg.norm(ema.shadow[k] - v) <= 0.5 * err0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 3), min_size=0, max_size=6))
def test_ema_state_stays_valid(seed, picks):
    bank, ema = ema_setup()
    rng = np.random.default_rng(seed)
    out = B.ema_update(ema, bank, picks, rng.normal(size=(len(picks), 3)))
    assert (out.cluster_size >= 0).all() and np.isfinite(out.shadow).all()


# -------------------------------------------------------------- requantise


def test_requantize_exact_embedding():
    table = np.random.default_rng(0).normal(size=(10, 4))
    out = B.requantize_entry(table[6], table, np.array([3, 4, 0]))
    assert list(out) == [6, 4, 0]


def test_requantize_tie_prefers_lower_id():
    table = np.zeros((6, 2))
    table[3], table[5] = [1.0, 0.0], [-1.0, 0.0]
    out = B.requantize_entry(np.zeros(2), table, np.array([4, 4]), excluded=(0, 1, 2, 4))
    assert out[0] == 3


def test_requantize_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(30, 5))
    for _ in range(20):
        shadow = rng.normal(size=5)
        best = min(range(3, 30), key=lambda t: (float(((table[t] - shadow) ** 2).sum()), t))
        assert B.requantize_entry(shadow, table, np.array([7, 0]))[0] == best


def test_requantize_full_greedy_stays_decodable():
    rng = np.random.default_rng(4)
    table = rng.normal(size=(12, 4))
    out = B.requantize_entry(rng.normal(size=4), table, np.array([5, 6, 7, 0]), mode="full-greedy")
    assert (out[:3] >= 3).all() and out[3] == 0


def test_requantize_bank_leaves_frozen_rows():
    bank, ema = ema_setup(n=16)
    table = np.random.default_rng(5).normal(size=(10, 3))
    before = bank.frozen_digest()
    B.requantize_bank(bank, ema, table)
    assert bank.frozen_digest() == before
    assert bank.entries.max() < bank.vocab_size


# ------------------------------------------------------------- persistence


def test_bank_roundtrip_bit_identical(tmp_path):
    bank, ema = ema_setup(n=16)
    B.save_bank(bank, ema, tmp_path / "b.xlmb")
    back, back_ema = B.load_bank(tmp_path / "b.xlmb")
    assert B.dump_bank(back, back_ema) == B.dump_bank(bank, ema)
    np.testing.assert_array_equal(back.freeze_mask, bank.freeze_mask)
    assert back.uuids == bank.uuids
    np.testing.assert_array_equal(back_ema.shadow, ema.shadow)


def test_bank_bad_magic(tmp_path):
    bank, ema = ema_setup()
    data = bytearray(B.dump_bank(bank, ema))
    data[0:4] = b"NOPE"
    with pytest.raises(MagicError):
        B.parse_bank(bytes(data))


def test_bank_version_names_both():
    bank, ema = ema_setup()
    data = bytearray(B.dump_bank(bank, ema))
    data[4:8] = (7).to_bytes(4, "little")
    with pytest.raises(VersionError, match=r"7.*1"):
        B.parse_bank(bytes(data))


def test_bank_truncated():
    bank, ema = ema_setup()
    with pytest.raises(TruncatedFileError):
        B.parse_bank(B.dump_bank(bank, ema)[:-5])


def test_bank_rejects_non_square():
    with pytest.raises(ConfigError):
        B.MemoryBank(np.zeros((5, 2), int), np.zeros(5, bool), [uuid.uuid4()] * 5, 4, 0.0)
