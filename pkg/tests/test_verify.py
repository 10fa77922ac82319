"""The suites must fail when the implementation under test is broken."""

import json

import numpy as np
import torch

from meme import returns as R
from meme import verify as V
from meme.learning import trust_region_mask
from meme.mixture import DiscountedUCBTuned


def test_kappa_miswiring_is_caught():
    def miswired(x, lam, kappa):
        return R.soft_watkins_lambda(x, lam, 1.0)  # ignores the configured kappa
    res = V.special_case_suite(soft_watkins=miswired, n_inputs=300)
    assert not res.passed and res.detail["mismatches"]["watkins"] > 0


def test_off_by_one_engine_is_caught():
    def shifted(x, lam_fn, boot):
        out = R.general_qlambda(x, lam_fn, boot)
        out.returns = np.roll(out.returns, 1)
        return out
    res = V.returns_oracle_suite(engine=shifted, n_instances=50)
    assert not res.passed and res.detail["max_abs_error"] > 1e-6


def test_correct_implementations_pass_small():
    assert V.returns_oracle_suite(n_instances=50).passed
    assert V.special_case_suite(n_inputs=100).passed


def test_inverted_trust_region_is_caught():
    def inverted(q, q_t, g, sigma, alpha):
        return ~trust_region_mask(q, q_t, g, sigma, alpha)
    assert V.trust_region_suite().passed
    assert not V.trust_region_suite(mask_fn=inverted).passed


def test_sign_flipped_trust_region_is_caught():
    def flipped(q, q_t, g, sigma, alpha):
        gap = q - q_t
        outside = gap.abs() > alpha * sigma
        toward = torch.sign(gap) == torch.sign(q - g)  # sign flip in the direction test
        return ~(outside & toward)
    assert not V.trust_region_suite(mask_fn=flipped).passed


def test_sign_agnostic_trust_region_is_caught():
    def size_only(q, q_t, g, sigma, alpha):
        return (q - q_t).abs() <= alpha * sigma
    assert not V.trust_region_suite(mask_fn=size_only).passed


def test_random_bandit_is_caught():
    class Random(DiscountedUCBTuned):
        def greedy(self):
            return 0
    assert not V.bandit_suite(bandit_cls=Random, n_seeds=5, pulls=200).passed


def test_gradient_suite():
    res = V.gradient_suite()
    assert res.passed, res.detail


def test_suite_lines_are_json():
    res = V.rescale_suite(n=1000)
    rec = json.loads(res.line())
    assert rec["name"] == "rescale_roundtrip" and rec["passed"] is True
