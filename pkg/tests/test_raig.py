import json

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from oracles import cosine_rank, same_ranking

from ipercept.gateway import PerceptionVerdict, ScriptedResponder, VlmGateway, parse_verdict
from ipercept.imaging import RgbImage
from ipercept.policy import EpisodeConfig, OutcomeKind, action_category, run_episode
from ipercept.projection import WorkspaceConfig
from ipercept.raig import (
    ACTION_TYPES,
    EmptyStore,
    ExampleStore,
    HashedBagOfWords,
    HttpEmbedder,
    InContextExample,
    InvalidChoice,
    ProviderError,
    RaigSelector,
    StoreError,
    ingest,
    load_store,
    read_examples,
    retrieve_top_k,
    select_example,
    write_example,
)
from ipercept.sim import TabletopScene, TabletopWorld

STORE = FIXTURES / "raig_store"
TASK4_QUERY = "What is written on the paper under the blue block?"


def task4_verdict():
    items = json.loads((FIXTURES / "scripts" / "task4_raig.json").read_text())
    return parse_verdict(items[0]["reply"])


def brute(store, q):
    return cosine_rank(store.ids, store.vectors, q)


# -- embedding ---------------------------------------------------------------------


def test_embedding_is_deterministic():
    e = HashedBagOfWords()
    a, b = e.embed("push the red tin aside"), e.embed("push the red tin aside")
    assert np.array_equal(a, b) and a.shape == (256,)
    assert np.array_equal(e.embed("Push THE red tin"), e.embed("push the red tin"))


def test_disjoint_vocabularies_are_orthogonal():
    e = HashedBagOfWords()
    left, right = "eraser clips table", "screw shadow lamp"
    # precondition of the fixture: no bucket collisions between the two word sets
    assert not {e.bucket(w) for w in left.split()} & {e.bucket(w) for w in right.split()}
    a, b = e.embed(left), e.embed(right)
    assert float(a @ b) == 0.0


def test_empty_text_is_rejected():
    with pytest.raises(ProviderError):
        HashedBagOfWords().embed("")
    with pytest.raises(ProviderError):
        HashedBagOfWords().embed("  ...  ")


def test_http_embedder_through_mock_transport():
    seen = []

    def handler(req):
        seen.append(json.loads(req.content))
        return httpx.Response(200, json={"data": [{"embedding": [0.0, 3.0, 4.0]}]})

    e = HttpEmbedder("http://emb.test/v1", "m", transport=httpx.MockTransport(handler))
    assert np.array_equal(e.embed("hello"), [0.0, 3.0, 4.0])
    assert seen == [{"model": "m", "input": "hello"}]
    bad = HttpEmbedder("http://emb.test", "m", transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    with pytest.raises(ProviderError):
        bad.embed("x")
    junk = HttpEmbedder("http://emb.test", "m", transport=httpx.MockTransport(lambda r: httpx.Response(200, json={"data": []})))
    with pytest.raises(ProviderError):
        junk.embed("x")


# -- retrieval ---------------------------------------------------------------------


def test_equal_vector_ranks_first():
    vecs = np.array([[1.0, 0, 0], [0.6, 0.8, 0], [0, 0, 1]])
    top = retrieve_top_k(["a", "b", "c"], vecs, np.array([0.6, 0.8, 0]), 1)
    assert top[0][0] == "b" and top[0][1] == pytest.approx(1.0, abs=1e-12)


def test_k_is_clamped_and_ties_use_id():
    vecs = np.array([[1.0, 0], [1.0, 0], [0, 1.0]])
    got = retrieve_top_k(["z", "a", "m"], vecs, np.array([1.0, 0]), 10)
    assert [i for i, _ in got] == ["a", "z", "m"]
    with pytest.raises(EmptyStore):
        retrieve_top_k([], np.zeros((0, 2)), np.array([1.0, 0]))
    with pytest.raises(ValueError):
        retrieve_top_k(["a"], vecs[:1], np.array([1.0, 0]), 0)


def test_zero_vectors_score_zero():
    got = retrieve_top_k(["a", "b"], np.array([[0.0, 0.0], [-1.0, 0.0]]), np.array([1.0, 0.0]), 2)
    assert got == [("a", 0.0), ("b", -1.0)]


def test_fixture_store_matches_brute_force():
    store = load_store(STORE)
    assert len(store) == 8
    e = HashedBagOfWords()
    for ex in store.examples.values():
        q = e.embed(ex.query_description)
        got = [(ex2.id, s) for ex2, s in store.retrieve(q, 8)]
        assert same_ranking(got, brute(store, q))


@given(st.integers(0, 2**32 - 1), st.integers(1, 2000), st.integers(1, 12), st.integers(1, 20))
def test_random_store_matches_brute_force(seed, n, dim, k):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n, dim))
    if rng.random() < 0.3:
        # duplicated rows create exact ties
        vecs[rng.integers(0, n, n // 3)] = vecs[0]
    ids = [f"ex{i:05d}" for i in rng.permutation(n)]
    q = rng.normal(size=dim)
    got = retrieve_top_k(ids, vecs, q, k)
    assert same_ranking(got, cosine_rank(ids, vecs, q)[: min(k, n)])


@given(st.integers(0, 2**32 - 1))
def test_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    n, dim = int(rng.integers(2, 300)), int(rng.integers(2, 16))
    vecs = rng.normal(size=(n, dim))
    ids = [f"e{i}" for i in range(n)]
    q = rng.normal(size=dim)
    base = retrieve_top_k(ids, vecs, q, n)
    scaled = vecs * rng.uniform(1e-3, 1e3, size=(n, 1))
    again = retrieve_top_k(ids, scaled, q, n)
    assert same_ranking(again, [(s, i) for i, s in base])


def test_retrieval_scales_to_ten_thousand():
    rng = np.random.default_rng(7)
    vecs = rng.normal(size=(10_000, 32))
    ids = [f"x{i:05d}" for i in range(10_000)]
    q = rng.normal(size=32)
    assert same_ranking(retrieve_top_k(ids, vecs, q, 10_000), cosine_rank(ids, vecs, q))


# -- store files ---------------------------------------------------------------------


def test_store_round_trip(tmp_path):
    frame = RgbImage.blank(16, 12, (10, 20, 30))
    ex = InContextExample("demo", "find the key", "push the box aside", "push", "box hides key", (frame,), ((0.5, 0.0, 0.2),))
    write_example(tmp_path, ex)
    store = ingest(tmp_path, HashedBagOfWords())
    assert (tmp_path / "index.json").exists()
    again = load_store(tmp_path)
    assert again.ids == ["demo"] and np.array_equal(again.vectors, store.vectors)
    back = read_examples(tmp_path)["demo"]
    assert back.frames == (frame,) and back.end_effector_positions == ((0.5, 0.0, 0.2),)


def test_store_errors(tmp_path):
    with pytest.raises(StoreError):
        read_examples(tmp_path / "nope")
    with pytest.raises(EmptyStore):
        ingest(tmp_path, HashedBagOfWords())
    write_example(tmp_path, InContextExample("a", "q", "t", "grasp"))
    with pytest.raises(StoreError):
        load_store(tmp_path)
    ingest(tmp_path, HashedBagOfWords())
    write_example(tmp_path, InContextExample("b", "q", "t", "grasp"))
    with pytest.raises(StoreError):
        load_store(tmp_path)
    (tmp_path / "c.json").write_text("{}")
    with pytest.raises(StoreError):
        read_examples(tmp_path)


def test_example_invariants():
    with pytest.raises(ValueError):
        InContextExample("a", "q", "t", "levitate")
    with pytest.raises(ValueError):
        InContextExample("a", "q", "t", "push", frames=(RgbImage.blank(2, 2),))
    with pytest.raises(StoreError):
        ExampleStore({}, np.zeros((1, 3)), ["a"])


# -- arbitration ---------------------------------------------------------------------


def _gateway(reply):
    return VlmGateway(ScriptedResponder.from_list([{"step": "*", "op": "select", "reply": reply}]))


def _cands():
    push = InContextExample("p", "q", "t", "push")
    grasp = InContextExample("g", "q", "t", "grasp")
    return [grasp, push]


def test_choice_two_selects_push():
    v = PerceptionVerdict(False, target_object="tin", suggested_action="grasp")
    ex, target = select_example(_gateway("Choice: 2"), "q", RgbImage.blank(8, 8), v, _cands())
    assert ex.action_type == "push" and action_category(ex.action_type) == "a2"
    assert target == "tin"


def test_choice_out_of_range():
    v = PerceptionVerdict(False, target_object="tin", suggested_action="grasp")
    with pytest.raises(InvalidChoice):
        select_example(_gateway("Choice: 3"), "q", RgbImage.blank(8, 8), v, _cands())
    with pytest.raises(InvalidChoice):
        select_example(_gateway("Choice: 0"), "q", RgbImage.blank(8, 8), v, _cands())
    with pytest.raises(ValueError):
        select_example(_gateway("Choice: 1"), "q", RgbImage.blank(8, 8), v, [])


def test_every_action_type_has_a_category():
    for t in ACTION_TYPES:
        assert action_category(t) in {"a1", "a2", "a3"}


def test_naive_and_arbitrated_differ_on_place_fixture():
    store = load_store(STORE)
    v = task4_verdict()
    img = RgbImage.blank(8, 8)
    gw = _gateway("Choice: 2\nTarget Object: blue block")
    naive = RaigSelector(store, HashedBagOfWords(), gw, naive=True).choose(TASK4_QUERY, img, v, 0)
    chosen = RaigSelector(store, HashedBagOfWords(), gw).choose(TASK4_QUERY, img, v, 0)
    assert naive[0] == "push"
    assert chosen == ("place", "blue block")
    assert action_category(naive[0]) != action_category(chosen[0])


def _raig_episode(naive):
    sc = TabletopScene.load(FIXTURES / "scenes" / "task4_block_text.json")
    world = TabletopWorld(sc, WorkspaceConfig(marker_pose=sc.marker_pose))
    gw = VlmGateway(ScriptedResponder.load(FIXTURES / "scripts" / "task4_raig.json"))
    sel = RaigSelector(load_store(STORE), HashedBagOfWords(), gw, naive=naive)
    return run_episode(EpisodeConfig(use_raig=True), TASK4_QUERY, world, gw, sel), world


def test_raig_episode_resolves_with_arbitration():
    result, world = _raig_episode(False)
    assert result.outcome.kind is OutcomeKind.RESOLVED
    assert world.events == ["grasp_place"]


def test_naive_raig_episode_goes_wrong():
    result, world = _raig_episode(True)
    # the top-ranked demonstration is a push, for which the script has no reply
    assert result.outcome.kind is OutcomeKind.ERROR
    assert world.events == []


def test_raig_is_off_by_default():
    assert EpisodeConfig().use_raig is False
