import pytest
from hypothesis import given, settings, strategies as st

from graphkbc.kg import LabeledTriplet, Triplet, Vocabulary, load_triplet_file
from graphkbc.ookb import (
    OokbPosition,
    choose_candidates,
    filter_eval_sets,
    finalize_ookb,
    generate,
    split_name,
    split_training,
    write_split,
)

A, B, C, D, E = range(5)
R, S = 0, 1


def lt(h, r, t, label=True):
    return LabeledTriplet(Triplet(h, r, t), label)


class TestChooseCandidates:
    TEST_FILE = [lt(A, R, B), lt(C, R, D, label=False)]

    def test_head(self):
        assert choose_candidates(self.TEST_FILE, 2, OokbPosition.HEAD) == {A, C}

    def test_both(self):
        assert choose_candidates(self.TEST_FILE, 2, OokbPosition.BOTH) == {A, B, C, D}

    def test_prefix_only(self):
        assert choose_candidates(self.TEST_FILE, 1, OokbPosition.TAIL) == {B}

    def test_n_too_large(self):
        with pytest.raises(ValueError):
            choose_candidates(self.TEST_FILE, 3, OokbPosition.HEAD)


class TestFinalize:
    def test_connected_candidate_kept(self):
        assert finalize_ookb({A}, [Triplet(A, R, B)]) == {A}

    def test_candidate_pair_dropped(self):
        assert finalize_ookb({A, B}, [Triplet(A, R, B)]) == set()

    def test_self_loop_does_not_qualify(self):
        assert finalize_ookb({A}, [Triplet(A, R, A)]) == set()


class TestSplitTraining:
    def test_empty_ookb_is_identity(self):
        train = [Triplet(A, R, B), Triplet(B, S, C)]
        kept, aux, discarded = split_training(train, set())
        assert (kept, aux, discarded) == (train, [], [])

    def test_double_ookb_discarded(self):
        kept, aux, discarded = split_training([Triplet(A, R, B)], {A, B})
        assert (kept, aux, discarded) == ([], [], [Triplet(A, R, B)])

    def test_three_way_partition(self):
        train = [Triplet(A, R, B), Triplet(B, S, C), Triplet(A, R, C), Triplet(D, R, E)]
        kept, aux, discarded = split_training(train, {A, C})
        assert kept == [Triplet(D, R, E)]
        assert aux == [Triplet(A, R, B), Triplet(B, S, C)]
        assert discarded == [Triplet(A, R, C)]


class TestFilterEvalSets:
    def test_empty_ookb(self):
        test_file = [lt(A, R, B)]
        valid_file = [lt(C, R, D, label=False)]
        test, valid = filter_eval_sets(test_file, valid_file, 1, set())
        assert test == []
        assert valid == valid_file

    def test_labels_preserved(self):
        test_file = [lt(A, R, B, label=False), lt(C, R, D)]
        valid_file = [lt(C, R, D), lt(A, R, D, label=False)]
        test, valid = filter_eval_sets(test_file, valid_file, 2, {A})
        assert test == [lt(A, R, B, label=False)]
        assert valid == [lt(C, R, D)]


class TestGenerate:
    # hand-enumerated toy corpus: candidates from test heads {A, D};
    # A has the training neighbor B outside the candidates, D has none.
    TRAIN = [Triplet(A, R, B), Triplet(B, S, C), Triplet(C, R, D), Triplet(A, S, D)]
    VALID = [lt(B, R, C), lt(A, R, C, label=False)]
    TEST = [lt(A, R, C), lt(D, S, B, label=False)]

    def test_toy_corpus_hand_enumeration(self):
        split = generate(self.TRAIN, self.VALID, self.TEST, 2, OokbPosition.HEAD)
        # candidates {A, D}; (A,R,B) qualifies A; (C,R,D) qualifies D;
        # (A,S,D) qualifies neither (both endpoints are candidates).
        assert split.ookb_entities == {A, D}
        assert list(split.train.triplets) == [Triplet(B, S, C)]
        assert split.aux == [Triplet(A, R, B), Triplet(C, R, D)]
        assert split.test == self.TEST  # both touch an OOKB entity
        assert split.validation == [lt(B, R, C)]
        st = split.stats
        assert st.training_triplets == 1
        assert st.auxiliary_triplets == 2
        assert st.discarded_triplets == 1
        assert st.ookb_entities == 2
        assert st.auxiliary_entities == 2  # B and C
        assert st.auxiliary_entities_total == 4
        assert split.check() == []

    def test_partition_property(self):
        split = generate(self.TRAIN, self.VALID, self.TEST, 2, OokbPosition.HEAD)
        total = (
            split.stats.training_triplets
            + split.stats.auxiliary_triplets
            + split.stats.discarded_triplets
        )
        assert total == len(self.TRAIN)

    def test_determinism(self):
        a = generate(self.TRAIN, self.VALID, self.TEST, 2, OokbPosition.BOTH)
        b = generate(self.TRAIN, self.VALID, self.TEST, 2, OokbPosition.BOTH)
        assert a.ookb_entities == b.ookb_entities
        assert a.aux == b.aux
        assert list(a.train.triplets) == list(b.train.triplets)


@settings(max_examples=50)
@given(
    train=st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1), st.integers(0, 9)), max_size=30),
    test=st.lists(
        st.tuples(st.integers(0, 9), st.integers(0, 1), st.integers(0, 9), st.booleans()),
        min_size=1,
        max_size=20,
    ),
    position=st.sampled_from(list(OokbPosition)),
)
def test_generate_properties(train, test, position):
    train = [Triplet(*t) for t in train]
    test_file = [lt(h, r, t, label) for h, r, t, label in test]
    sizes = sorted({1, max(1, len(test_file) // 2), len(test_file)})
    candidate_sets = [choose_candidates(test_file, n, position) for n in sizes]
    for small, big in zip(candidate_sets, candidate_sets[1:]):
        assert small <= big  # prefix monotonicity
    ookb = finalize_ookb(candidate_sets[-1], train)
    kept, aux, discarded = split_training(train, ookb)
    assert len(kept) + len(aux) + len(discarded) == len(train)
    split = generate(train, [], test_file, sizes[-1], position)
    assert split.check() == []


def test_write_split_round_trips(tmp_path):
    ev = Vocabulary(["a", "b", "c", "d", "e"])
    rv = Vocabulary(["r", "s"])
    split = generate(TestGenerate.TRAIN, TestGenerate.VALID, TestGenerate.TEST, 2, "head")
    name = split_name("head", 2)
    assert name == "head-2"
    paths = write_split(split, tmp_path, name, ev, rv)
    ev2, rv2 = Vocabulary(), Vocabulary()
    train = load_triplet_file(paths["train"], ev2, rv2)
    assert [x.triplet for x in train] == [
        Triplet(ev2.id_of("b"), rv2.id_of("s"), ev2.id_of("c"))
    ]
    test = load_triplet_file(paths["test"], ev2, rv2, labeled=True)
    assert [x.label for x in test] == [True, False]
    stats_text = open(paths["stats"]).read()
    assert "ookb_entities=2" in stats_text
    ookb_names = open(paths["ookb"]).read().split()
    assert ookb_names == ["a", "d"]
