"""Command-line experiment runner.

``gradient-gates <task> --config <path> [--seed S] [--out DIR] [--threads K]``

Every run writes its task outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 unexpected failure, 2 invalid input or
configuration, 3 solver or simulation failure, 4 finished without
convergence.  Failures print one ``ERROR {json}`` line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io
from .errors import GateError, NotConvergedError, ValidationError

TASKS = ("modes", "synthesize", "schedule-static", "reference-mono", "compile-qft",
         "compile-rainbow", "simulate", "bound", "print-defaults")
PRESETS = ("static-lp", "fig2", "ising4", "rainbow", "qft4", "n20", "pairwise")

DEFAULTS = {
    "chain": {
        "n_ions": 4,
        "com_eta": 0.3,  # tunes the gradient; set to null to use `gradient` directly
        "gradient": 250.0,  # T/m
        "trap_frequency_hz": 100e3,
        "ion_mass_amu": 171.0,
    },
    "target": {
        "kind": "ising",  # ising | rainbow | pair | qft-stage | matrix
        "J": float(np.pi / 4),
        "pair": [1, 3],  # ions (1-based) for kind=pair
        "stage": 1,  # for kind=qft-stage
        "matrix": None,  # path to a JSON N x N coupling matrix for kind=matrix
    },
    "synthesis": {
        "boundary_regime": "oscillating",
        "frequency_mode": "harmonic",
        "grid_density": 1.0,
        "n_tones": None,
        "tone_factor": None,  # n_tones = round(factor * (2N + 1)) when set
        "T_bounds_periods": [0.5, 12.0],
        "duration_periods": None,
        "duration_step": 0.1,
        "multistart_count": 8,
        "tolerance": 1e-8,
        "max_nfev": 400,
        "boundary_weight": 10.0,
        "target_weight": 1.0,
        "max_segments": 4,
    },
    "reference": {"J": float(np.pi / 4), "mode": 0, "side": "red"},
    "static": {"J": float(np.pi / 4)},
    "qft": {"n_qubits": 4, "input": 1, "swap_mode": "local", "decompose": True,
            "synthesize": False},
    "rainbow": {"J": float(np.pi / 4), "mode": "full", "synthesize": True},
    "simulate": {
        "sequence": None,  # path to a sequence JSON; default: synthesize the target
        "initial": "0010",
        "cutoffs": 8,
        "n_samples": 200,
        "bipartitions": [[1], [1, 2], [1, 4]],
        "method": "branch",
        "fidelity": True,
    },
    "bound": {"realized": None},  # path to JSON matrix or sequence; default: synthesize
    "sweep": {
        "eta": [0.01, 0.02, 0.05, 0.1, 0.2, 0.3],
        "fidelity_eta": [0.05, 0.1, 0.2, 0.3],
    },
}

PRESET_CONFIGS = {
    "static-lp": {"chain": {"n_ions": 4}},
    "fig2": {"chain": {"n_ions": 4}},
    "ising4": {"chain": {"n_ions": 4, "com_eta": 0.3},
               "synthesis": {"T_bounds_periods": [2.0, 4.0]}},
    "rainbow": {"chain": {"n_ions": 4, "com_eta": 0.15},
                "synthesis": {"T_bounds_periods": [4.0, 10.0], "duration_step": 0.25}},
    "qft4": {"chain": {"n_ions": 4, "com_eta": 0.3}},
    "n20": {"chain": {"n_ions": 20, "com_eta": 0.2},
            "synthesis": {"n_tones": 120, "T_bounds_periods": [6.0, 14.0],
                          "duration_step": 0.5}},
    "pairwise": {"chain": {"n_ions": 3, "com_eta": 0.1}, "target": {"J": 0.1},
                 "synthesis": {"T_bounds_periods": [1.0, 12.0], "duration_step": 0.5}},
}


# ----------------------------------------------------------------------------
# config -> objects


def make_chain(cfg: dict):
    from .chain import AMU, PhysicalParams, build_chain, chain_with_com_eta

    c = cfg["chain"]
    params = PhysicalParams(ion_mass=float(c["ion_mass_amu"]) * AMU,
                            trap_frequency=2 * np.pi * float(c["trap_frequency_hz"]),
                            gradient=float(c["gradient"]))
    n = int(c["n_ions"])
    if c.get("com_eta") is not None:
        return chain_with_com_eta(n, float(c["com_eta"]), params)
    return build_chain(n, params)


def make_target(cfg: dict, n: int) -> np.ndarray:
    """Coupling matrix (convention ``exp(-i sum_{j != k} Lam ZZ)``) named by the config."""
    from .circuits import angles_to_lambda, qft_stage_targets, rainbow_angles

    t = cfg["target"]
    J = float(t["J"])
    kind = t["kind"]
    if kind == "ising":
        lam = np.full((n, n), J)
    elif kind == "rainbow":
        lam = angles_to_lambda(rainbow_angles(n, J))
    elif kind == "pair":
        j, k = (int(i) - 1 for i in t["pair"])
        if not (0 <= j < n and 0 <= k < n and j != k):
            raise ValidationError(f"pair {t['pair']} is not a pair of distinct ions in 1..{n}")
        lam = np.zeros((n, n))
        lam[j, k] = lam[k, j] = J
    elif kind == "qft-stage":
        lam = angles_to_lambda(qft_stage_targets(n)[int(t["stage"]) - 1])
    elif kind == "matrix":
        if not t.get("matrix"):
            raise ValidationError("target.kind=matrix needs target.matrix (a JSON file)")
        lam = np.array(io.read_json(t["matrix"]), dtype=float)
        if lam.shape != (n, n):
            raise ValidationError(f"target matrix has shape {lam.shape}, expected {(n, n)}")
    else:
        raise ValidationError(f"unknown target kind {kind!r}")
    np.fill_diagonal(lam, 0.0)
    return lam


def synthesis_options(cfg: dict, chain, seed, threads) -> dict:
    s = cfg["synthesis"]
    period = 2 * np.pi / chain.mode_frequencies[0]
    n_tones = s.get("n_tones")
    if n_tones is None and s.get("tone_factor") is not None:
        n_tones = int(round(float(s["tone_factor"]) * (2 * chain.n_ions + 1)))
    opts = {
        "frequency_mode": s["frequency_mode"],
        "grid_density": float(s["grid_density"]),
        "n_tones": n_tones,
        "T_bounds": tuple(float(x) * period for x in s["T_bounds_periods"]),
        "duration": None if s.get("duration_periods") is None
        else float(s["duration_periods"]) * period,
        "duration_step": float(s["duration_step"]),
        "multistart_count": int(s["multistart_count"]),
        "tolerance": float(s["tolerance"]),
        "max_nfev": int(s["max_nfev"]),
        "boundary_weight": float(s["boundary_weight"]),
        "target_weight": float(s["target_weight"]),
        "rng_seed": int(seed),
        "workers": int(threads or 1),
    }
    return opts


# ----------------------------------------------------------------------------
# task bodies: each writes its files and fills `summary`


class Run:
    def __init__(self, cfg, out: Path, seed: int, threads):
        self.cfg = cfg
        self.out = out
        self.seed = seed
        self.threads = threads
        self.outputs: list[Path] = []
        self.summary: dict = {}
        self.converged = True

    def json(self, name, obj):
        self.outputs.append(io.write_json(self.out / name, obj))

    def csv(self, name, cols):
        self.outputs.append(io.write_csv(self.out / name, cols))

    def text(self, name, text):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.outputs.append(p)

    # --------------------------------------------------------------------
    def chain(self):
        return make_chain(self.cfg)

    def task_modes(self):
        ch = self.chain()
        self.json("chain.json", ch.to_dict())
        cols = {"mode": np.arange(1, ch.n_ions + 1), "nu_rad_s": ch.mode_frequencies,
                "nu_over_nu1": ch.mode_frequencies / ch.mode_frequencies[0]}
        for j in range(ch.n_ions):
            cols[f"eta_ion{j + 1}"] = ch.eta[j]
        self.csv("modes.csv", cols)
        self.summary.update(n_ions=ch.n_ions, com_eta=ch.com_eta)

    def _synthesize(self, ch, lam):
        from .optimizer import synthesize_sequence

        opts = synthesis_options(self.cfg, ch, self.seed, self.threads)
        regime = self.cfg["synthesis"]["boundary_regime"]
        seq, dec = synthesize_sequence(lam, ch, regime,
                                       max_segments=int(self.cfg["synthesis"]["max_segments"]),
                                       **opts)
        return seq, dec

    def _write_sequence_outputs(self, ch, seq, lam, prefix=""):
        period = 2 * np.pi / ch.mode_frequencies[0]
        self.json(f"{prefix}sequence.json", seq.to_dict())
        self.text(f"{prefix}listing.txt", seq.listing() + "\n")
        results = []
        converged = True
        for i, seg in enumerate(seq.segments()):
            res = getattr(seg, "result", None)
            if res is None:
                continue
            converged &= bool(res.converged)
            results.append(res.to_dict())
            hist = np.asarray(res.cost_history, dtype=float)
            self.csv(f"{prefix}cost_history_{i + 1}.csv",
                     {"evaluation": np.arange(hist.size), "cost": hist})
            w = seg.waveform
            self.csv(f"{prefix}spectrum_{i + 1}.csv",
                     {"omega_rad_s": w.frequencies, "omega_over_nu1":
                      np.asarray(w.frequencies) / ch.mode_frequencies[0],
                      "amplitude": w.amplitudes, "phase": w.phases})
            t = np.linspace(0.0, w.duration, 801)
            from .drive import eval_f

            self.csv(f"{prefix}waveform_{i + 1}.csv",
                     {"t_s": t, "t_over_T": t / w.duration, "f": eval_f(w, t)})
        self.json(f"{prefix}results.json", results)
        total = np.zeros((ch.n_ions, ch.n_ions))
        for seg in seq.segments():
            total += seg.effective_lambda(ch)
        np.fill_diagonal(total, 0.0)
        self.json(f"{prefix}achieved_lambda.json", total)
        err = float(np.linalg.norm(total - lam))
        self.summary.update(total_duration_s=seq.total_duration,
                            total_duration_periods=seq.total_duration / period,
                            segments=len(seq.segments()), lambda_error=err,
                            converged=converged)
        self.converged &= converged
        return total

    def task_synthesize(self):
        ch = self.chain()
        lam = make_target(self.cfg, ch.n_ions)
        seq, _ = self._synthesize(ch, lam)
        self._write_sequence_outputs(ch, seq, lam)

    def task_schedule_static(self):
        from .synthesis import static_min_time_schedule

        ch = self.chain()
        J = float(self.cfg["static"]["J"])
        sched = static_min_time_schedule(ch, J)
        self.json("schedule.json", sched.to_dict())
        # total time in units of J / (eta_C**2 nu_C), nu_C in rad/s
        unit = J / (ch.com_eta**2 * ch.mode_frequencies[0])
        self.summary.update(total_time_s=sched.total_time, feasible=sched.feasible,
                            method=sched.method,
                            time_constant=sched.total_time / unit if J else 0.0)
        self.converged &= bool(sched.feasible)

    def task_reference_mono(self):
        from .synthesis import monochromatic_reference

        ch = self.chain()
        r = self.cfg["reference"]
        ref = monochromatic_reference(ch, float(r["J"]), int(r["mode"]), r["side"])
        self.json("reference.json", {
            "frequency_rad_s": ref.frequency, "detuning_rad_s": ref.detuning,
            "duration_s": ref.duration, "predicted": ref.predicted,
            "predicted_lambda": ref.predicted_lambda, "side": ref.side, "mode": ref.mode,
            "waveform": ref.waveform().to_dict()})
        self.summary.update(duration_periods=ref.duration * ch.mode_frequencies[0] / (2 * np.pi))

    def _qft(self, ch=None):
        from .circuits import compile_qft

        q = self.cfg["qft"]
        n = int(q["n_qubits"])
        use_chain = ch if q["decompose"] else None
        opts = synthesis_options(self.cfg, ch, self.seed, self.threads) if (
            q["synthesize"] and ch is not None) else {}
        if q["synthesize"]:
            opts["boundary_regime"] = self.cfg["synthesis"]["boundary_regime"]
        return compile_qft(n, use_chain, synthesize=bool(q["synthesize"]),
                           swap_mode=q["swap_mode"], **opts)

    def task_compile_qft(self):
        from .circuits import qft_matrix
        from .sequence import phase_aligned_distance, sequence_unitary

        q = self.cfg["qft"]
        n = int(q["n_qubits"])
        ch = self.chain() if q["decompose"] else None
        if ch is not None and ch.n_ions != n:
            raise ValidationError("qft.n_qubits must equal chain.n_ions when decomposing")
        seq = self._qft(ch)
        self.json("sequence.json", seq.to_dict())
        self.text("listing.txt", seq.listing() + "\n")
        U = sequence_unitary(seq, n, ch)
        dist = phase_aligned_distance(U, qft_matrix(n))
        x = _basis_index(q["input"], n)
        amp = U[:, x]
        # align the global phase on the |0...0> output
        amp = amp * np.exp(-1j * np.angle(amp[0]))
        kappa = np.arange(2**n)
        self.csv("basis_phases.csv", {
            "kappa": kappa,
            "bitstring": np.array([format(k, f"0{n}b") for k in kappa], dtype=object),
            "abs_amplitude": np.abs(amp),
            "phase": np.mod(np.angle(amp), 2 * np.pi)})
        self.summary.update(unitary_distance=dist, input=int(x),
                            total_duration_s=seq.total_duration)

    def task_compile_rainbow(self):
        from .circuits import compile_rainbow

        ch = self.chain()
        r = self.cfg["rainbow"]
        opts = {}
        if r["synthesize"]:
            opts = synthesis_options(self.cfg, ch, self.seed, self.threads)
            opts["boundary_regime"] = self.cfg["synthesis"]["boundary_regime"]
        seq = compile_rainbow(ch.n_ions, ch, float(r["J"]), bool(r["synthesize"]), r["mode"],
                              **opts)
        from .circuits import angles_to_lambda, rainbow_angles

        self._write_sequence_outputs(ch, seq, angles_to_lambda(rainbow_angles(ch.n_ions,
                                                                               float(r["J"]))))
        return ch, seq

    def _sequence_for_simulation(self, ch):
        from .sequence import GateSequence

        path = self.cfg["simulate"].get("sequence")
        if path:
            seq = GateSequence.from_dict(io.read_json(path))
            return seq
        lam = make_target(self.cfg, ch.n_ions)
        seq, _ = self._synthesize(ch, lam)
        self._write_sequence_outputs(ch, seq, lam)
        return seq

    def task_simulate(self, ch=None, seq=None, prefix=""):
        from . import simulator as sim
        from .sequence import EntanglingSegment, LocalGate, sequence_unitary

        ch = ch or self.chain()
        seq = seq if seq is not None else self._sequence_for_simulation(ch)
        s = self.cfg["simulate"]
        n = ch.n_ions
        initial = s["initial"]
        if isinstance(initial, int):
            initial = format(initial, f"0{n}b")
        if len(initial) != n:
            raise ValidationError(f"initial bitstring {initial!r} does not have {n} qubits")
        cut = s["cutoffs"]
        cutoffs = tuple(cut) if isinstance(cut, (list, tuple)) else (int(cut),) * n
        if s["method"] == "branch":
            state = sim.BranchState.product(initial, cutoffs)
        else:
            state = sim.HybridState.product(initial, cutoffs)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            final, traj, info = sim.evolve_lab_frame(seq, ch, state, n_samples=int(s["n_samples"]),
                                                     method=s["method"])
        info["warnings"] = [str(w.message) for w in caught]
        parts = [tuple(int(i) - 1 for i in p) for p in s["bipartitions"]]
        obs = sim.observables(traj, n, parts)
        cols = {"t_s": obs["times"], "norm": obs["norms"]}
        for l in range(n):
            cols[f"n_mode{l + 1}"] = obs["phonon_numbers"][:, l]
        segs = [e for e in seq if isinstance(e, EntanglingSegment)]
        if len(segs) == 1 and all(not isinstance(e, LocalGate) for e in seq) \
                and not segs[0].pattern.flipped:
            q0 = np.zeros(2**n)
            q0[int(initial, 2)] = 1.0
            pred = sim.predicted_phonon_numbers(segs[0].waveform, ch, q0, obs["times"])
            for l in range(n):
                cols[f"n_mode{l + 1}_predicted"] = pred[:, l]
        for name, series in obs["entropies"].items():
            cols[f"entropy_{name}"] = series
        self.csv(f"{prefix}trajectory.csv", cols)
        disp = obs["phase_space"]
        ps = {"t_s": obs["times"]}
        weights = np.array([np.real(np.diag(r)) for r in traj.qubit_rho])
        for sidx in np.flatnonzero(weights.max(axis=0) > 1e-12):
            bits = format(int(sidx), f"0{n}b")
            for l in range(n):
                ps[f"alpha_{bits}_mode{l + 1}"] = disp[:, sidx, l]
        self.csv(f"{prefix}phase_space.csv", ps)
        rho = final.qubit_density_matrix()
        result = {"info": info, "final_phonon_numbers": final.phonon_numbers(),
                  "final_norm": final.norm, "final_qubit_density": rho}
        if s["fidelity"] and n <= 6:
            U = sequence_unitary(seq, n, ch, use="target")
            F, finfo = sim.gate_fidelity(seq, ch, U, cutoffs=cutoffs)
            result["gate_fidelity"] = F
            result["gate_fidelity_info"] = finfo
            self.summary["gate_infidelity"] = 1 - F
            psi_ideal = U[:, int(initial, 2)]
            result["state_fidelity_vs_ideal"] = float(np.real(np.vdot(psi_ideal,
                                                                      rho @ psi_ideal)))
        self.json(f"{prefix}simulation.json", result)
        self.summary.update(final_phonons_max=float(np.max(final.phonon_numbers())),
                            cutoffs=list(info["cutoffs"]))
        return final, traj, obs

    def task_bound(self):
        from . import simulator as sim
        from .sequence import GateSequence

        ch = self.chain()
        lam = make_target(self.cfg, ch.n_ions)
        path = self.cfg["bound"].get("realized")
        if path:
            data = io.read_json(path)
            if isinstance(data, dict) and "ops" in data:
                seq = GateSequence.from_dict(data)
                realized = sum(e.effective_lambda(ch) for e in seq.segments())
            else:
                realized = np.array(data, dtype=float)
        else:
            seq, _ = self._synthesize(ch, lam)
            realized = self._write_sequence_outputs(ch, seq, lam)
        report = sim.fidelity_report(realized, lam, ch.n_ions)
        if ch.n_ions <= 12:
            report.metadata["exact_worst_case"] = sim.exact_worst_case_fidelity(realized, lam)
        self.json("fidelity_report.json", report.to_dict())
        self.summary.update(bound=report.bound, process_fidelity=report.process_fidelity,
                            average_infidelity=1 - report.average_fidelity)

    # --------------------------------------------------------------------
    # presets

    def preset_static_lp(self):
        self.task_schedule_static()

    def preset_fig2(self):
        from . import simulator as sim
        from .chain import chain_with_com_eta
        from .sequence import EntanglingSegment, GateSequence, zz_unitary_diagonal
        from .synthesis import SignPattern, monochromatic_reference, static_min_time_schedule

        base = self.chain()
        n = base.n_ions
        J = float(self.cfg["reference"]["J"])
        etas = np.array(self.cfg["sweep"]["eta"], dtype=float)
        t_mono, t_static = [], []
        for eta in etas:
            ch = chain_with_com_eta(n, eta, base.params)
            period = 2 * np.pi / ch.mode_frequencies[0]
            t_mono.append(monochromatic_reference(ch, J).duration / period)
            t_static.append(static_min_time_schedule(ch, J).total_time / period)
        t_mono, t_static = np.array(t_mono), np.array(t_static)
        self.csv("gate_times.csv", {"eta": etas, "T_mono_periods": t_mono,
                                    "T_static_periods": t_static})
        slope_m = float(np.polyfit(np.log(etas), np.log(t_mono), 1)[0])
        slope_s = float(np.polyfit(np.log(etas), np.log(t_static), 1)[0])
        fid_eta = np.array(self.cfg["sweep"]["fidelity_eta"], dtype=float)
        fids = []
        lam = np.full((n, n), J)
        np.fill_diagonal(lam, 0.0)
        U = np.diag(zz_unitary_diagonal(lam))
        for eta in fid_eta:
            ch = chain_with_com_eta(n, eta, base.params)
            ref = monochromatic_reference(ch, J, side="blue")
            seg = EntanglingSegment(ref.waveform(), SignPattern.identity(n), "oscillating",
                                    target_lambda=lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                F, _ = sim.gate_fidelity(GateSequence([seg]), ch, U)
            fids.append(F)
        self.csv("mono_fidelity.csv", {"eta": fid_eta, "gate_fidelity": np.array(fids),
                                       "infidelity": 1 - np.array(fids)})
        self.summary.update(slope_mono=slope_m, slope_static=slope_s)

    def preset_ising4(self):
        self.cfg["simulate"]["initial"] = "0010"
        ch = self.chain()
        lam = make_target(self.cfg, ch.n_ions)
        seq, _ = self._synthesize(ch, lam)
        self._write_sequence_outputs(ch, seq, lam)
        self.task_simulate(ch, seq, prefix="init0010_")
        self.cfg["simulate"]["initial"] = "1010"
        self.cfg["simulate"]["fidelity"] = False
        self.task_simulate(ch, seq, prefix="init1010_")

    def preset_rainbow(self):
        self.cfg["target"]["kind"] = "rainbow"
        self.cfg["simulate"]["initial"] = "0" * int(self.cfg["chain"]["n_ions"])
        self.cfg["simulate"]["fidelity"] = False
        ch, seq = self.task_compile_rainbow()
        final, _, _ = self.task_simulate(ch, seq)
        from .circuits import singlet_product_state

        if ch.n_ions % 2 == 0:
            tgt = singlet_product_state(ch.n_ions)
            F = float(np.real(np.vdot(tgt, final.qubit_density_matrix() @ tgt)))
            self.summary["singlet_fidelity"] = F

    def preset_qft4(self):
        self.cfg["qft"]["n_qubits"] = int(self.cfg["chain"]["n_ions"])
        self.task_compile_qft()

    def preset_n20(self):
        from . import simulator as sim
        from .drive import phase_history, regime_initial_condition
        from .synthesis import lambda_from_phases

        ch = self.chain()
        lam = make_target(self.cfg, ch.n_ions)
        seq, _ = self._synthesize(ch, lam)
        realized = self._write_sequence_outputs(ch, seq, lam)
        seg = seq.segments()[0]
        t = np.linspace(0.0, seg.duration, 201)
        g0 = regime_initial_condition(seg.waveform, ch.n_ions, seg.regime)
        D = phase_history(seg.waveform, ch, g0, t)
        J = float(self.cfg["target"]["J"])
        cols = {"t_over_T": t / seg.duration}
        iu = np.triu_indices(ch.n_ions, 1)
        for row, Dt in enumerate(D):
            L = lambda_from_phases(ch.eta, Dt)[iu] / J
            for p, (j, k) in enumerate(zip(*iu)):
                cols.setdefault(f"lambda_{j + 1}_{k + 1}_over_J", np.empty(t.size))[row] = L[p]
        self.csv("lambda_history.csv", cols)
        report = sim.fidelity_report(realized, lam, ch.n_ions)
        self.json("fidelity_report.json", report.to_dict())
        ratio = realized[iu] / lam[iu]
        self.summary.update(bound=report.bound, average_infidelity=1 - report.average_fidelity,
                            ratio_min=float(ratio.min()), ratio_max=float(ratio.max()))

    def preset_pairwise(self):
        """Couple ion 1 to every other ion only: drives for Lam and -Lam around a pi-frame."""
        from . import simulator as sim
        from .optimizer import SynthesisProblem, synthesize_waveform
        from .sequence import EntanglingSegment, GateSequence, sequence_unitary
        from .synthesis import compose_segments, pairwise_isolation

        ch = self.chain()
        cfg = io.merge(self.cfg, {"target": {"kind": "ising"}})
        lam1 = make_target(cfg, ch.n_ions)
        opts = synthesis_options(self.cfg, ch, self.seed, self.threads)
        seq = GateSequence()
        halves = pairwise_isolation(lam1, 0)
        for target, pattern in halves:
            res = synthesize_waveform(SynthesisProblem(ch, target, **opts))
            self.converged &= bool(res.converged)
            seq.append(EntanglingSegment(res.waveform, pattern, "oscillating",
                                         target_lambda=target, result=res))
        goal = compose_segments(halves)
        self._write_sequence_outputs(ch, seq, goal)
        U = sequence_unitary(seq, ch.n_ions, ch, use="target")
        F, _ = sim.gate_fidelity(seq, ch, U)
        self.summary["gate_infidelity"] = 1 - F
        self.summary["algebraic_off_target_max"] = float(np.max(np.abs(goal[1:, 1:])))


def _basis_index(value, n: int) -> int:
    if isinstance(value, str):
        if len(value) != n or set(value) - {"0", "1"}:
            raise ValidationError(f"input {value!r} is not an {n}-bit string")
        return int(value, 2)
    x = int(value)
    if not 0 <= x < 2**n:
        raise ValidationError(f"input {x} outside 0..{2**n - 1}")
    return x


# ----------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="gradient-gates", description=__doc__.splitlines()[0])
    p.add_argument("task", help="one of " + ", ".join(TASKS) + ", or reproduce-<"
                   + "|".join(PRESETS) + ">")
    p.add_argument("--config", type=Path, help="YAML or JSON configuration file")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=None, help="thread limit for BLAS and "
                   "parallel multistarts")
    return p


def _thread_limit(k):
    if not k:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(k))


def error_record(exc: BaseException, code: int) -> str:
    msg = " ".join(str(exc).split())
    return "ERROR " + json.dumps({"exit_code": code, "type": type(exc).__name__,
                                  "message": msg}, sort_keys=True)


def run(task: str, config: dict | None = None, seed: int | None = None,
        out: Path | str = "out", threads: int | None = None) -> int:
    """Run one task; returns the process exit status."""
    start = time.perf_counter()
    out = Path(out)
    if task == "print-defaults":
        sys.stdout.write(io.dump_yaml(DEFAULTS))
        return 0
    preset = task[len("reproduce-"):] if task.startswith("reproduce-") else None
    if preset is not None and preset not in PRESETS:
        raise ValidationError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    if preset is None and task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    cfg = io.merge(DEFAULTS, PRESET_CONFIGS.get(preset, {}))
    cfg = io.merge(cfg, config or {})
    unknown = set(config or {}) - set(DEFAULTS)
    if unknown:
        raise ValidationError(f"unknown configuration sections {sorted(unknown)}")
    seed = 0 if seed is None else int(seed)
    r = Run(cfg, out, seed, threads)
    recorded = io.merge(cfg, {})
    with _thread_limit(threads):
        if preset is not None:
            getattr(r, "preset_" + preset.replace("-", "_"))()
        else:
            getattr(r, "task_" + task.replace("-", "_"))()
    status = "converged" if r.converged else "not-converged"
    r.json("summary.json", r.summary)
    manifest = io.build_manifest(task, recorded, seed, r.outputs,
                                 time.perf_counter() - start, status, threads)
    io.write_json(out / "manifest.json", manifest)
    if not r.converged:
        raise NotConvergedError(f"{task} finished without convergence; see {out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = io.load_config(args.config) if args.config else {}
        return run(args.task, config, args.seed, args.out, args.threads)
    except GateError as exc:
        print(error_record(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover - defensive
        print(error_record(exc, 1), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
