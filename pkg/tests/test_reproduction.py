"""Supplementary diagnostics for the directional comparison.

These do not replace any acceptance criterion. They document how pseudo-label
quality depends on the noise level, and show the expected ordering of the
clustering scores once the labels are clean.
"""

import numpy as np
import pytest

from emargin.loss import data_cosine_matrix
from emargin.signals import synth_regimes
from test_acceptance import REPRO_DATA, directional_runs


def dissimilar_rates(noise_sigma: float) -> tuple[float, float]:
    """Fraction of same-regime and cross-regime pairs flagged dissimilar at threshold 0.4."""
    b = synth_regimes(**{**REPRO_DATA, "noise_sigma": noise_sigma})
    T = b.data.shape[1]
    off = ~np.eye(T, dtype=bool)
    same, cross = [], []
    for s in range(len(b)):
        low = data_cosine_matrix(b.data[s]) <= 0.4
        eq = b.labels[s][:, None] == b.labels[s][None, :]
        same.append(low[eq & off].mean())
        cross.append(low[~eq].mean())
    return float(np.mean(same)), float(np.mean(cross))


def test_pseudo_label_noise_by_sigma():
    same_lo, cross_lo = dissimilar_rates(0.1)
    same_hi, cross_hi = dissimilar_rates(0.3)
    # clean at low noise; at sigma 0.3 same-regime cosines straddle the threshold
    assert same_lo < 0.01 and cross_lo > 0.95
    assert same_hi > 0.3 and cross_hi > 0.9


@pytest.mark.slow
def test_low_noise_clustering_ordering():
    res = directional_runs(0.1)
    em, base = res["emargin"], res["infonce"]
    print(res)
    assert em["dbi"] <= base["dbi"]
    assert em["silhouette"] >= base["silhouette"]
    assert em["f1_macro"] <= base["f1_macro"] + 0.02
