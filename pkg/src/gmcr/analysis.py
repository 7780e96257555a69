"""Post-processing of diagnostics: growth-rate fits and restart comparisons."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pic import fit_growth_rate, two_stream_growth_rate


def log_curve_deviation(t_ref, e_ref, t, e) -> float:
    """Largest |ln E - ln E_ref| over the common steps, as a fraction of the
    dynamic range of ln E_ref.

    Field energy spans several decades in the linear stage, so the natural
    yardstick for "agreement of the semilog curves" is that range rather
    than the local value of ln E_ref (which crosses zero).
    """
    t_ref, e_ref, t, e = (np.asarray(a, dtype=float) for a in (t_ref, e_ref, t, e))
    keys = np.round(t_ref, 9)
    index = {k: i for i, k in enumerate(keys)}
    pairs = [(index[k], j) for j, k in enumerate(np.round(t, 9)) if k in index]
    if not pairs:
        raise ValueError("no common time levels")
    i, j = np.array(pairs).T
    ln_ref = np.log(e_ref)
    span = ln_ref.max() - ln_ref.min()
    dev = np.abs(np.log(e[j]) - ln_ref[i]).max()
    return float(dev / span) if span > 0 else float(dev)


@dataclass
class GrowthReport:
    fitted: float
    oracle: float
    window: tuple[float, float]

    @property
    def relative_error(self) -> float:
        return abs(self.fitted - self.oracle) / self.oracle if self.oracle else math.inf


def growth_report(t, field_energy, v_beam: float, length: float, mode: int = 1,
                  omega_p: float = 1.0, window=(3.0, 9.0)) -> GrowthReport:
    k = 2 * math.pi * mode / length
    return GrowthReport(fit_growth_rate(t, field_energy, *window),
                        two_stream_growth_rate(v_beam, k, omega_p), tuple(window))


@dataclass
class RestartComparison:
    t_restart: float
    log_deviation: float
    pre_restart_de: float  # max |dE_total| per step before the restart, reference run
    restart_de: float  # |dE_total| of the restart row
    post_restart_de: float  # max |dE_total| over the steps after the restart
    max_continuity: float
    gauss_jump: float  # |gauss_rms after - gauss_rms before| at the restart

    @property
    def spike_factor(self) -> float:
        return self.restart_de / self.pre_restart_de if self.pre_restart_de else math.inf


def compare_restart(ref: dict, restarted: dict) -> RestartComparison:
    """Compare a restarted segment against the reference run (column dicts).

    The first row of ``restarted`` is the restart row itself.
    """
    t0 = restarted["t"][0]
    before = ref["t"] <= t0 + 1e-9
    pre = np.abs(ref["dE_total"][before][1:])
    at = np.flatnonzero(np.isclose(ref["t"], t0))
    gauss_before = ref["gauss_rms"][at[0]] if at.size else np.nan
    return RestartComparison(
        t_restart=float(t0),
        log_deviation=log_curve_deviation(ref["t"], ref["E_E"], restarted["t"][1:],
                                          restarted["E_E"][1:]),
        pre_restart_de=float(pre.max()) if pre.size else 0.0,
        restart_de=float(abs(restarted["dE_total"][0])),
        post_restart_de=float(np.abs(restarted["dE_total"][1:]).max(initial=0.0)),
        max_continuity=float(max(ref["continuity_rms"].max(),
                                 restarted["continuity_rms"].max())),
        gauss_jump=float(abs(restarted["gauss_rms"][0] - gauss_before)),
    )
