"""Evaluation metrics: edit distance, TER, similarity, reports, mode ablation."""
import numpy as np
import pytest

from toksep import corpus, evaluate, frontend, model, tokenizer
from toksep.audio import load_manifest
from toksep.corpus import CorpusConfig
from toksep.evaluate import (EvalReport, ablation_summary, edit_distance,
                             feature_mse, spk_sim_d, token_error_rate)
from toksep.frontend import FeatureStack, FrontendConfig
from toksep.tokenizer import TokenGrid


def slow_edit_distance(a, b):
    """Textbook quadratic DP, the oracle for the vectorized implementation."""
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[m][n]


class TestEditDistance:
    def test_hand_cases(self):
        assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
        assert edit_distance([], [4, 5]) == 2
        assert edit_distance([4, 5], []) == 2
        assert edit_distance([1, 2, 3], [1, 3]) == 1          # deletion
        assert edit_distance([1, 2, 3], [1, 9, 3]) == 1       # substitution
        assert edit_distance([1, 3], [1, 2, 3]) == 1          # insertion
        # the classic: kitten -> sitting needs 3 edits
        kitten = [ord(c) for c in "kitten"]
        sitting = [ord(c) for c in "sitting"]
        assert edit_distance(kitten, sitting) == 3

    def test_matches_reference_dp_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            a = rng.integers(0, 4, rng.integers(0, 12)).tolist()
            b = rng.integers(0, 4, rng.integers(0, 12)).tolist()
            assert edit_distance(a, b) == slow_edit_distance(a, b)

    def test_metric_properties(self):
        rng = np.random.default_rng(1)
        seqs = [rng.integers(0, 3, rng.integers(1, 10)).tolist() for _ in range(6)]
        for a in seqs:
            for b in seqs:
                dab = edit_distance(a, b)
                assert dab == edit_distance(b, a)
                assert abs(len(a) - len(b)) <= dab <= max(len(a), len(b))
                for c in seqs:
                    assert dab <= edit_distance(a, c) + edit_distance(c, b)


class TestTokenErrorRate:
    def test_zero_for_identical(self):
        assert token_error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_normalizes_by_reference_length(self):
        assert token_error_rate([9, 9], [1, 2, 3, 4]) == pytest.approx(1.0)
        # a hypothesis longer than the reference can exceed 1
        assert token_error_rate([1, 2, 3, 4, 5], [9]) == pytest.approx(5.0)

    def test_two_dim_averages_layers(self):
        hyp = np.array([[1, 2, 3], [9, 9, 9]])
        ref = np.array([[1, 2, 3], [1, 2, 3]])
        assert token_error_rate(hyp, ref) == pytest.approx(0.5)

    def test_error_cases(self):
        with pytest.raises(ValueError):
            token_error_rate([1], np.zeros((1, 2, 3)))
        with pytest.raises(ValueError):
            token_error_rate(np.array([[1]]), np.array([[1], [1]]))
        with pytest.raises(ValueError):
            token_error_rate(np.array([[1]]), np.array([[]]))


@pytest.fixture(scope="module")
def axis_codebook():
    """K=2 codebook whose centroids are the first two basis directions."""
    pts = np.zeros((1, 4, 8))
    pts[0, 0, 0] = pts[0, 1, 0] = 1.0
    pts[0, 2, 1] = pts[0, 3, 1] = 1.0
    return tokenizer.fit_codebook([FeatureStack(pts)], K=2, seed=0)


class TestSimilarityAndDistortion:
    def test_identical_grids_give_exact_optima(self, axis_codebook):
        g = TokenGrid(np.array([[0, 1, 0]]), K=2)
        assert spk_sim_d(g, g, axis_codebook) == 1.0
        assert feature_mse(g, g, axis_codebook) == 0.0

    def test_orthogonal_pools_give_zero_cosine(self, axis_codebook):
        a = TokenGrid(np.array([[0, 0]]), K=2)
        b = TokenGrid(np.array([[1, 1]]), K=2)
        assert spk_sim_d(a, b, axis_codebook) == pytest.approx(0.0, abs=1e-12)

    def test_feature_mse_hand_value(self, axis_codebook):
        a = TokenGrid(np.array([[0, 0]]), K=2)
        b = TokenGrid(np.array([[1, 1]]), K=2)
        # centroids differ by (1,-1,0,...): squared distance 2 over 8 dims
        assert feature_mse(a, b, axis_codebook) == pytest.approx(2.0 / 8.0)
        with pytest.raises(ValueError):
            feature_mse(a, TokenGrid(np.array([[0]]), K=2), axis_codebook)


@pytest.fixture(scope="module")
def eval_world(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval_corpus")
    ccfg = CorpusConfig(n_speakers=3, n_utterances=4, eval_utts=1,
                        min_duration=0.6, max_duration=0.7, seed=0)
    table_path, eval_path = corpus.build_corpus(ccfg, out)
    table = corpus.load_utterance_table(table_path)
    fe = FrontendConfig(layer_count=2, e_feat=8)
    stacks = [frontend.extract(corpus.load_wav_cached(p), fe)
              for s in table.speakers() for p in table.paths(s, train_only=True)]
    cb = tokenizer.fit_codebook(stacks, K=5, seed=0)
    mcfg = model.preset("tiny")
    params = model.init_params(mcfg, seed=0)
    rows = load_manifest(eval_path)[:2]
    return params, mcfg, fe, cb, rows, out


class TestEvaluate:
    def test_report_shape_and_oracle(self, eval_world):
        params, mcfg, fe, cb, rows, base = eval_world
        rep = evaluate.evaluate(params, mcfg, fe, cb, rows, base)
        assert len(rep.rows) == 2
        assert rep.mode == "standard"
        assert rep.codebook_hash == cb.hash()
        # oracle self-checks hold even for an untrained model
        assert rep.oracle_ok and all(r.oracle_ok for r in rep.rows)
        assert 0.0 <= rep.accuracy <= 1.0
        assert rep.ter >= 0.0
        assert len(rep.accuracy_layers) == 2

    def test_baseline_is_mode_independent(self, eval_world):
        params, mcfg, fe, cb, rows, base = eval_world
        std = evaluate.evaluate(params, mcfg, fe, cb, rows, base, mode="standard")
        noc = evaluate.evaluate(params, mcfg, fe, cb, rows, base, mode="nocat")
        assert std.baseline_accuracy == noc.baseline_accuracy
        assert std.baseline_ter == noc.baseline_ter

    def test_deterministic_json(self, eval_world):
        params, mcfg, fe, cb, rows, base = eval_world
        a = evaluate.evaluate(params, mcfg, fe, cb, rows, base).to_json()
        b = evaluate.evaluate(params, mcfg, fe, cb, rows, base).to_json()
        assert a == b

    def test_format_table_lists_rows(self, eval_world):
        params, mcfg, fe, cb, rows, base = eval_world
        text = evaluate.evaluate(params, mcfg, fe, cb, rows, base).format_table()
        assert "mode=standard" in text
        assert "oracle self-check: ok" in text
        assert rows[0].target.split("/")[-1] in text

    def test_empty_manifest_rejected(self, eval_world):
        params, mcfg, fe, cb, _, base = eval_world
        with pytest.raises(ValueError):
            evaluate.evaluate(params, mcfg, fe, cb, [], base)

    def test_codebook_mismatch_rejected(self, eval_world):
        params, mcfg, fe, cb, rows, base = eval_world
        meta = {"codebook_hash": "not-the-right-hash"}
        with pytest.raises(ValueError, match="codebook"):
            evaluate.evaluate(params, mcfg, fe, cb, rows, base, checkpoint_meta=meta)


class TestAblationSummary:
    @staticmethod
    def report(mode, ter, acc=0.5):
        return EvalReport(mode=mode, config_hash="", codebook_hash="x",
                          ter=ter, accuracy=acc)

    def test_directional_flags(self):
        reports = {"standard": self.report("standard", 0.2),
                   "nocat": self.report("nocat", 0.4),
                   "hybrid": self.report("hybrid", 0.1)}
        s = ablation_summary(reports)
        assert s["standard_beats_nocat"] is True
        assert s["hybrid_inversion"] is False
        assert s["ter"] == {"standard": 0.2, "nocat": 0.4, "hybrid": 0.1}

    def test_inversions_detected(self):
        reports = {"standard": self.report("standard", 0.5),
                   "nocat": self.report("nocat", 0.3),
                   "hybrid": self.report("hybrid", 0.6)}
        s = ablation_summary(reports)
        assert s["standard_beats_nocat"] is False
        assert s["hybrid_inversion"] is True

    def test_missing_modes_omit_flags(self):
        s = ablation_summary({"standard": self.report("standard", 0.2)})
        assert "standard_beats_nocat" not in s
        assert "hybrid_inversion" not in s
