"""Acceptance criteria 1-10 at the stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary by
conftest.py).  Criteria 7-10 share one training sweep: 3 seeds of the full
model (XE then SCST), the no-gate variant and the no-memory variant, all at
desk scale on the synthetic long-tail corpus.
"""

import hashlib
import math
import statistics
import time

import numpy as np
import pytest

from ratcap import experiment as ex
from ratcap import numerics as nx
from ratcap.config import RunConfig
from ratcap.decoding import beam_search, decode_beam, decode_greedy, greedy_search
from ratcap.hnsw import HnswIndex
from ratcap.metrics import METRIC_NAMES, IdfTable, bleu, cider_d, rouge_l
from ratcap.model import CaptionModel, ModelConfig, load_checkpoint, save_checkpoint
from ratcap.nn import AttentionWeights
from ratcap.retrieval import nn_quality_report
from ratcap.tokenizer import BOS, EOS
from ratcap.training import Adam, scst_loss, scst_step

from oracles import CASES, REF_BLEU, REF_CIDER_D, enumerate_all, rigged_advance, rigged_state, rouge_l_oracle

SEEDS = (0, 1, 2)
VARIANTS = ("full", "no-gate", "no-memory")
MEMORY = [[BOS, 5, 6, 7, EOS], [BOS, 8, 9, EOS], [BOS, 5, 6, EOS]]


def small_cfg(**kw):
    base = dict(d_feat=6, vocab_size=23, d=8, enc_layers=1, dec_layers=2, heads=2, mem_layers=1, max_len=12, ffn_mult=2)
    base.update(kw)
    return ModelConfig(**base)


# -- 1 ---------------------------------------------------------------------------------
def _op_cases(rng):
    t = lambda *shape, lo=None: nx.Tensor(rng.normal(size=shape) if lo is None else rng.uniform(lo, 2.0, size=shape), requires_grad=True)
    a, b = t(3, 4), t(3, 4)
    row = t(4)
    m1, m2 = t(2, 3, 4), t(4, 5)
    pos = t(3, 4, lo=0.5)
    x5 = t(5, 4)
    gain, bias = t(4), t(4)
    table = t(6, 4)
    bias5 = t(5)
    q, k, v = t(3, 4), t(5, 4), t(5, 4)
    w = AttentionWeights(4, rng)
    for p in w.parameters():
        p.data += rng.normal(scale=0.1, size=p.shape)
    kv = t(5, 4)
    mask = nx.causal_mask(3, 5, offset=2)
    proj = rng.normal(size=(3, 4))
    weights = {}

    def s(y):
        # fixed random projection per output shape, so each case is one scalar function
        if y.shape not in weights:
            weights[y.shape] = nx.Tensor(rng.normal(size=y.shape))
        return nx.tsum(y * weights[y.shape])

    return {
        "add (broadcast)": (lambda: s(a + row), [a, row]),
        "sub": (lambda: s(a - b), [a, b]),
        "mul": (lambda: s(a * b), [a, b]),
        "exp": (lambda: s(nx.exp(a)), [a]),
        "log": (lambda: s(nx.log(pos)), [pos]),
        "relu": (lambda: s(nx.relu(a)), [a]),
        "sigmoid": (lambda: s(nx.sigmoid(a)), [a]),
        "reshape": (lambda: s(nx.reshape(a, (4, 3))), [a]),
        "transpose": (lambda: s(nx.transpose(m1, (2, 0, 1))), [m1]),
        "index": (lambda: s(nx.index(x5, np.array([0, 2, 2, 4]))), [x5]),
        "concat": (lambda: s(nx.concat([a, b], axis=0)), [a, b]),
        "embedding": (lambda: s(nx.embedding(table, [1, 3, 3, 0])), [table]),
        "sum": (lambda: s(nx.tsum(m1, axis=1)), [m1]),
        "mean": (lambda: s(nx.tmean(m1, axis=-1, keepdims=True)), [m1]),
        "matmul (batched)": (lambda: s(nx.matmul(m1, m2)), [m1, m2]),
        "softmax": (lambda: s(nx.softmax(a)), [a]),
        "log_softmax": (lambda: s(nx.log_softmax(a)), [a]),
        "layer_norm": (lambda: s(nx.layer_norm(a, gain, bias)), [a, gain, bias]),
        "pick": (lambda: s(nx.pick(nx.log_softmax(a), np.array([0, 3, 1]))), [a]),
        "attention_core (masked)": (lambda: s(nx.attention_core(q, k, v, 2, mask)), [q, k, v]),
        "linear": (lambda: s(nx.linear(a, m2, bias5)), [a, m2, bias5]),
        "multi_head_attention": (lambda: s(nx.multi_head_attention(nx.Tensor(proj), kv, None, w, 2)), [kv] + w.parameters()),
    }


def test_criterion_01_gradient_integrity(criterion):
    with criterion(1, "gradient integrity (FD rel. error <= 1e-4, < 60 s)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = {}
        for name, (fn, params) in _op_cases(rng).items():
            worst[name] = nx.gradient_check(fn, params)
        ops_max = max(worst.values())
        e2e = {}
        for mode in ("gated", "sequential", "none"):
            m = CaptionModel(small_cfg(d=4, heads=2, vocab_size=7, d_feat=3, dec_layers=1, max_len=6, memory=mode), seed=4)
            if mode == "gated":
                m.decoder[0].knn.gate.data[...] = 0.3
            grid = np.random.default_rng(5).normal(size=(3, 3))
            memory = [[BOS, 3, 4, EOS], [BOS, 6, EOS]]

            def loss():
                lp = nx.log_softmax(m.forward(grid, [BOS, 3, 4, 5], memory))
                return nx.tmean(nx.pick(lp, [3, 4, 5, EOS])) * -1.0

            e2e[mode] = nx.gradient_check(loss, m.parameters())
        seconds = time.perf_counter() - t0
        c.note(f"{len(worst)} ops max {ops_max:.1e}; end-to-end " + ", ".join(f"{k} {v:.1e}" for k, v in e2e.items()))
        bad = [n for n, e in worst.items() if not e <= 1e-4]
        assert not bad, f"ops over tolerance: {bad}"
        assert max(e2e.values()) <= 1e-4
        assert seconds < 60


# -- 2 ---------------------------------------------------------------------------------
def test_criterion_02_index_fidelity(criterion):
    with criterion(2, "HNSW recall@10 >= 0.95 on 10k unit vectors, d=64 (< 120 s)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        data = rng.normal(size=(10_000, 64))
        data /= np.linalg.norm(data, axis=1, keepdims=True)
        index = HnswIndex.build(data, m=32, ef_construction=128, seed=0)
        stored = data.astype(np.float32).astype(np.float64)  # the index keeps float32 precision
        queries = rng.normal(size=(500, 64))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        hits = 0
        for q in queries:
            got, _ = index.search(q, 10, ef_search=64)
            truth = np.argsort(-(stored @ q), kind="stable")[:10]
            hits += len(set(got.tolist()) & set(truth.tolist()))
        recall = hits / (10 * len(queries))
        seconds = time.perf_counter() - t0
        c.note(f"recall@10 {recall:.4f} over {len(queries)} queries")
        assert recall >= 0.95
        assert seconds < 120


# -- 3 ---------------------------------------------------------------------------------
def test_criterion_03_gate_mechanics(criterion):
    with criterion(3, "gate saturation (1e-5), shared-query audit, zero-sum advantages") as c:
        model = CaptionModel(small_cfg(dec_layers=3), seed=3)
        mem = model.encode_memory(MEMORY)
        rng = np.random.default_rng(0)
        worst = 0.0
        for layer in model.decoder:
            knn = layer.knn
            h = nx.Tensor(rng.normal(size=(5, model.cfg.d)))
            causal = nx.causal_mask(5)
            q = knn.q(h)
            local = knn.local_branch(q, knn.local.k(h), knn.local.v(h), causal).data
            k_m, v_m = knn.memory_kv(mem)
            memory = knn.memory_branch(q, k_m, v_m, None).data
            for value, target in ((20.0, local), (-20.0, memory)):
                knn.gate.data[...] = value
                worst = max(worst, float(np.max(np.abs(knn(h, mem, causal)[0].data - target))))
            knn.gate.data[...] = 0.0
        c.note(f"saturation max dev {worst:.1e}")
        assert worst <= 1e-5

        for layer in model.decoder:
            weights = sorted(n for n, _ in layer.knn.named_parameters() if n.endswith(".w"))
            assert weights == sorted(["q.w", "local.k.w", "local.v.w", "local.o.w", "memory.k.w", "memory.v.w", "memory.o.w"])
            assert [n for n, _ in layer.knn.named_parameters() if "." not in n] == ["s"]
        c.note("one shared W_q per layer, separate k/v/o per branch, one gate scalar")

        idf = IdfTable.build(refs for _, refs in CASES)
        max_dev = 0.0
        for i, (_, refs) in enumerate(CASES):
            m = CaptionModel(small_cfg(vocab_size=40), seed=i)
            words = {j: w for j, w in enumerate("a the dog cat on grass red sofa two sleeping".split(), start=3)}
            reward = lambda toks: cider_d(" ".join(words.get(t, "x") for t in toks), refs, idf)
            _, rewards, adv = scst_loss(m, rng.normal(size=(3, 6)), MEMORY, 5, reward)
            assert len(adv) == 5
            max_dev = max(max_dev, abs(math.fsum(adv)) / max(1.0, float(np.abs(rewards).max())))
        c.note(f"|sum adv| / max|r| <= {max_dev:.1e} over {len(CASES)} beams")
        # the mean baseline cancels to within one rounding of the reward scale
        assert max_dev <= 8 * np.finfo(float).eps

        # constant rewards: advantages and the whole update are exactly zero
        m = CaptionModel(small_cfg(), seed=1)
        before = {n: p.data.copy() for n, p in m.named_parameters()}
        scst_step(m, Adam(m.named_parameters()), [(np.ones((3, 6)), MEMORY)], 1e-2, 4, [lambda toks: 1.3])
        assert all(np.array_equal(before[n], p.data) for n, p in m.named_parameters())


# -- 4 ---------------------------------------------------------------------------------
def test_criterion_04_causality_and_decoding(criterion):
    with criterion(4, "causality bitwise, incremental == full (1e-9), beam1 == greedy, beam == exhaustive") as c:
        worst_inc = 0.0
        for mode in ("gated", "sequential", "none"):
            m = CaptionModel(small_cfg(memory=mode), seed=2)
            rng = np.random.default_rng(1)
            grid = rng.normal(size=(4, 6))
            tokens = [BOS] + [int(x) for x in rng.integers(3, 23, size=10)]
            logits = m.forward(grid, tokens, MEMORY).data
            for t in range(1, len(tokens)):
                changed = tokens[:t] + [int(x) for x in rng.integers(3, 23, size=len(tokens) - t)]
                assert np.array_equal(m.forward(grid, changed, MEMORY).data[:t], logits[:t]), (mode, t)
            full = nx.log_softmax(nx.Tensor(logits)).data
            state = m.start(grid, MEMORY)
            for t in range(len(tokens)):
                worst_inc = max(worst_inc, float(np.max(np.abs(state.logprobs - full[t]))))
                if t + 1 < len(tokens):
                    state = m.advance(state, tokens[t + 1])
        c.note(f"incremental max dev {worst_inc:.1e}")
        assert worst_inc <= 1e-9

        for seed in range(5):
            m = CaptionModel(small_cfg(), seed=seed)
            grid = np.random.default_rng(seed).normal(size=(3, 6))
            assert decode_beam(m, grid, MEMORY, beam_size=1) == [decode_greedy(m, grid, MEMORY)]
        assert beam_search(rigged_state([]), rigged_advance, 1, 4, eos=0, banned=())[0].tokens == greedy_search(
            rigged_state([]), rigged_advance, 4, eos=0, banned=()
        ).tokens

        truth = enumerate_all(4)
        exact = {tuple(seq): v for v, seq in truth}
        for beam in (1, 2, 3, 4, 6):
            got = beam_search(rigged_state([]), rigged_advance, beam, 4, eos=0, banned=())
            np.testing.assert_allclose([h.score for h in got], [v for v, _ in truth[:beam]], rtol=1e-12)
            assert len({tuple(h.tokens) for h in got}) == beam
            assert all(exact[tuple(h.tokens)] == pytest.approx(h.score, rel=1e-12) for h in got)
        c.note("beams 1,2,3,4,6 match enumeration of all 31 sequences")


# -- 5 ---------------------------------------------------------------------------------
def test_criterion_05_metric_oracles(criterion):
    with criterion(5, "metric oracles (BLEU/CIDEr-D 1e-4, ROUGE-L exact, identity/degenerate exact)") as c:
        idf = IdfTable.build(refs for _, refs in CASES)
        dev_bleu = max(max(abs(x - y) for x, y in zip(bleu(cand, refs), REF_BLEU[i])) for i, (cand, refs) in enumerate(CASES))
        dev_cider = max(abs(cider_d(cand, refs, idf) - REF_CIDER_D[i]) for i, (cand, refs) in enumerate(CASES))
        rouge_ok = all(rouge_l(cand, refs) == rouge_l_oracle(cand, refs) for cand, refs in CASES)
        c.note(f"{len(CASES)} cases: BLEU dev {dev_bleu:.1e}, CIDEr-D dev {dev_cider:.1e}, ROUGE-L exact {rouge_ok}")
        assert len(CASES) >= 10
        assert dev_bleu <= 1e-4 and dev_cider <= 1e-4 and rouge_ok

        assert bleu("a dog runs on the grass", ["a dog runs on the grass"]) == [1.0] * 4
        assert rouge_l("a dog runs on the grass", ["a dog runs on the grass"]) == 1.0
        assert bleu("", ["a dog"]) == [0.0] * 4 and rouge_l("", ["a dog"]) == 0.0 and cider_d("", ["a dog"], idf) == 0.0
        assert rouge_l("a dog", ["blue sky"]) == 0.0
        single = IdfTable.build([["a dog on the grass"]])
        assert single.degenerate and cider_d("a dog on the grass", ["a dog on the grass"], single) == 0.0
        ident = IdfTable.build([refs[:1] for _, refs in CASES])
        assert max(abs(cider_d(refs[0], refs[:1], ident) - 10.0) for _, refs in CASES) <= 1e-9


# -- shared desk-scale workspace and sweep -------------------------------------------------
@pytest.fixture(scope="session")
def desk():
    cfg = RunConfig()
    ws = ex.Workspace.synthetic(cfg)
    return cfg, ws


@pytest.fixture(scope="session")
def sweep(desk, tmp_path_factory):
    """3 seeds x {full + SCST, no-gate, no-memory}; the two ablations train XE only."""
    cfg, ws = desk
    root = tmp_path_factory.mktemp("sweep")
    before = ws.checksums()
    runs = {}
    t0 = time.perf_counter()
    for variant in VARIANTS:
        vcfg = ex.variant_config(cfg, variant)
        if variant != "full":
            vcfg = vcfg.replace("train", scst_steps=0)
        for seed in SEEDS:
            runs[variant, seed] = ex.run_training(ws, vcfg, root / f"{variant}_s{seed}", seed=seed)
    return {"runs": runs, "before": before, "after": ws.checksums(), "seconds": time.perf_counter() - t0, "cfg": cfg, "ws": ws}


def med(values):
    return float(statistics.median(values))


# -- 6 ---------------------------------------------------------------------------------
def test_criterion_06_table1_shape(criterion, desk):
    with criterion(6, "nn-report: oracle non-decreasing in k, mean not increasing k=5 -> 40 (< 5 min)") as c:
        t0 = time.perf_counter()
        cfg, ws = desk
        split = ws.splits["val"]
        report = nn_quality_report([(it.image_id, it.grid, it.captions) for it in split], ws.store, ws.index, cfg.retrieval, ks=(5, 10, 20, 40))
        seconds = time.perf_counter() - t0
        c.note("CIDEr-D mean " + " ".join(f"k{k}={report.mean[k]['CIDEr-D']:.3f}" for k in report.ks))
        c.note("oracle " + " ".join(f"k{k}={report.oracle[k]['CIDEr-D']:.3f}" for k in report.ks))
        for name in METRIC_NAMES:
            oracle = [report.oracle[k][name] for k in report.ks]
            assert all(b >= a for a, b in zip(oracle, oracle[1:])), name
            assert report.mean[40][name] <= report.mean[5][name], name
        assert seconds < 300


# -- 7 ---------------------------------------------------------------------------------
def test_criterion_07_table3_ordering(criterion, sweep):
    with criterion(7, "ordering full > no-memory with no-gate between within noise (3 seeds, < 2 h)") as c:
        runs = sweep["runs"]
        # identical budgets: compare all variants at the end of the XE stage
        cider = {v: [runs[v, s][0].xe_last["CIDEr-D"] for s in SEEDS] for v in VARIANTS}
        medians = {v: med(cider[v]) for v in VARIANTS}
        noise = max(float(np.std(cider[v])) for v in VARIANTS)
        for v in VARIANTS:
            c.note(f"{v} median {medians[v]:.3f} ({', '.join(f'{x:.3f}' for x in cider[v])})")
        c.note(f"noise (max seed std) {noise:.3f}; sweep {sweep['seconds'] / 60:.1f} min")
        full, nogate, none = medians["full"], medians["no-gate"], medians["no-memory"]
        strict = full > nogate > none
        loose = full > none and none - noise <= nogate <= full + noise
        c.note("strict ordering" if strict else "minimum ordering" if loose else "ordering violated")
        assert strict or loose
        assert sweep["seconds"] < 2 * 3600


# -- 8 ---------------------------------------------------------------------------------
def test_criterion_08_scst(criterion, sweep):
    with criterion(8, "SCST: median val CIDEr after SCST >= after XE; bandit increases monotonically") as c:
        runs = sweep["runs"]
        xe = [runs["full", s][0].xe_metrics["CIDEr-D"] for s in SEEDS]
        scst = [runs["full", s][0].scst_metrics["CIDEr-D"] for s in SEEDS]
        c.note(f"XE median {med(xe):.3f} -> SCST median {med(scst):.3f}")
        assert med(scst) >= med(xe)

        for seed in SEEDS:
            cfg = ModelConfig(d_feat=4, vocab_size=7, d=8, enc_layers=1, dec_layers=1, heads=2, mem_layers=1, max_len=2, ffn_mult=2)
            model = CaptionModel(cfg, seed=seed)
            grid = np.random.default_rng(seed).normal(size=(2, 4))
            mem = [[1, 5]]
            opt = Adam(model.named_parameters())
            reward = lambda toks: 1.0 if toks and toks[0] == 4 else 0.0
            expected = [math.exp(model.start(grid, mem).logprobs[4])]
            for _ in range(100):
                scst_step(model, opt, [(grid, mem)], 1e-3, 5, [reward])
                expected.append(math.exp(model.start(grid, mem).logprobs[4]))
            c.note(f"bandit seed {seed}: E[r] {expected[0]:.3f} -> {expected[-1]:.3f}")
            assert all(b > a for a, b in zip(expected, expected[1:]))


# -- 9 ---------------------------------------------------------------------------------
def test_criterion_09_exact_vs_hnsw(criterion, sweep):
    with criterion(9, "HNSW -> exact retrieval changes median val CIDEr by < 1 point") as c:
        cfg, ws = sweep["cfg"], sweep["ws"]
        hnsw, exact = [], []
        for seed in SEEDS:
            model, _ = load_checkpoint(sweep["runs"]["full", seed][0].checkpoint)
            hnsw.append(ex.evaluate_checkpoint(ws, cfg, model, "val", exact=False)["CIDEr-D"])
            exact.append(ex.evaluate_checkpoint(ws, cfg, model, "val", exact=True)["CIDEr-D"])
        delta_points = abs(med(exact) - med(hnsw)) * 100  # raw CIDEr-D x 100 = reported points
        c.note(f"HNSW median {med(hnsw):.4f}, exact median {med(exact):.4f}, delta {delta_points:.2f} points")
        assert delta_points < 1.0


# -- 10 --------------------------------------------------------------------------------
def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_10_reproducibility(criterion, sweep, tmp_path):
    with criterion(10, "bitwise determinism, checkpoint roundtrip, retrieval checksums untouched") as c:
        cfg, ws = sweep["cfg"], sweep["ws"]
        short = cfg.replace("train", xe_steps=20, scst_steps=2, val_every=10)
        a, _ = ex.run_training(ws, short, tmp_path / "a", seed=5)
        b, _ = ex.run_training(ws, short, tmp_path / "b", seed=5)
        ma, mb = load_checkpoint(a.checkpoint)[0], load_checkpoint(b.checkpoint)[0]
        assert ma.fingerprint() == mb.fingerprint()
        assert _sha(a.checkpoint) == _sha(b.checkpoint)
        c.note("same seed -> identical checkpoint bytes")

        for (variant, seed), (result, _) in sweep["runs"].items():
            model, extra = load_checkpoint(result.checkpoint)
            again = tmp_path / f"{variant}_{seed}.ckpt"
            save_checkpoint(model, again, extra)
            assert _sha(again) == _sha(result.checkpoint)
            reloaded, _ = load_checkpoint(again)
            assert all(np.array_equal(x, y) for x, y in zip(model.state_dict().values(), reloaded.state_dict().values()))
        c.note(f"{len(sweep['runs'])} checkpoints re-saved byte-identical")

        assert sweep["before"] == sweep["after"]
        assert all(repro["retrieval_untouched"] for _, repro in sweep["runs"].values())
        c.note("corpus/datastore/index checksums unchanged by training")


def test_retrieval_lowers_validation_xe(sweep):
    # pipeline-level oracle: median teacher-forced val XE of the best checkpoints
    runs = sweep["runs"]
    full = med([runs["full", s][0].val_xe for s in SEEDS])
    none = med([runs["no-memory", s][0].val_xe for s in SEEDS])
    print(f"median val XE: full {full:.4f}, no-memory {none:.4f}")
    assert full < none
