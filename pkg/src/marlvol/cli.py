"""Experiment subcommands: calibration runs, evaluation, surface synthesis.

Artifacts are plot-ready CSVs plus npz checkpoints, all written
atomically (temp file + rename), so an interrupted run never leaves a
truncated file behind. Heavy numeric imports are deferred into the
command bodies: the MARLVOL_THREADS cap has to reach the BLAS thread
pools before numpy is first imported.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile

from .errors import ConfigError, NumericError, ShapeError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

HISTORY_COLUMNS = ("iteration", "game_value", "game_value_se", "kl",
                   "clip_fraction", "policy_loss", "value_loss",
                   "wallclock_s")
TRACE_COLUMNS = ("iteration", "run", "step", "option_id", "model_value",
                 "target", "reward_component")
SMILE_COLUMNS = ("t_days", "strike", "model_iv", "target_iv", "error")
SWITCH_COLUMNS = ("iteration", "switch_volpts", "switch_se_volpts")
HEATMAP_COLUMNS = ("ln_spot_t1", "ln_spot_t", "count", "mean_vol",
                   "mean_localized_vol")

VANILLA_MATURITIES = (11, 21, 36, 51)
VANILLA_STRIKES = (0.95, 1.0, 1.05)
BERMUDAN_STRIKES = (0.90, 0.95, 1.0, 1.05, 1.10)
EXPERIMENT_KINDS = ("vanilla-surface", "bermudan")
STATE_MODES = ("plain", "path-dependent")

_SIM_DEFAULTS = dict(n=120_000, steps=51, runs=10, seed=0, t1_step=21,
                     t2_step=51, sigma_init=0.2, delta=1.0 / 252.0)
_SIM_INT_FIELDS = ("n", "steps", "runs", "seed", "t1_step", "t2_step")
_TRAINER_INT_FIELDS = ("n_p", "knn_k", "epochs", "value_epochs",
                       "max_iterations", "plateau_window")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def apply_thread_cap(environ=os.environ):
    """Propagate MARLVOL_THREADS into the BLAS thread-count variables.

    Must run before numpy is imported for the cap to take effect, which
    is why this module keeps its numeric imports inside the command
    functions. Returns the cap, or None when the variable is unset.
    """
    raw = environ.get("MARLVOL_THREADS")
    if raw is None:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(
            f"MARLVOL_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"MARLVOL_THREADS must be >= 1, got {cap}")
    for var in _THREAD_VARS:
        environ[var] = str(cap)
    return cap


# ---------------------------------------------------------------------------
# Atomic artifact writers
# ---------------------------------------------------------------------------

def atomic_write_text(path, text):
    """All-or-nothing text write via a temp file in the target directory."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True)
                      + "\n")


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ExperimentConfig:
    """Validated description of one calibration or evaluation run."""

    experiment: str
    surface: str
    sim: object
    trainer: object
    state_mode: str = "plain"
    action_variant: str = "A"
    shaping: bool = False
    maturities_days: tuple = VANILLA_MATURITIES
    strikes: tuple = VANILLA_STRIKES
    vega_weighted: bool = False
    bermudan_k1: float = 1.0
    bermudan_k2: float = 1.012
    bermudan_weight: float = 1.0
    fake_strike_mode: str = "delta"
    amc_degree: int = 8
    amc_use_frozen_vol: bool = False
    checkpoint_every: int = 50
    heatmap_bins: int = 20
    localize_bins: int = 50
    localize_min_count: int = 10
    scale: int = 1

    def require_valid(self):
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"experiment must be one of {EXPERIMENT_KINDS}, "
                f"got {self.experiment!r}")
        if self.state_mode not in STATE_MODES:
            raise ConfigError(
                f"state_mode must be one of {STATE_MODES}, "
                f"got {self.state_mode!r}")
        if self.action_variant not in ("A", "B"):
            raise ConfigError(
                f"action_variant must be 'A' or 'B', "
                f"got {self.action_variant!r}")
        if not os.path.isfile(self.surface):
            raise ConfigError(f"surface file {self.surface} does not exist")
        if self.trainer.n_p > self.sim.n:
            raise ConfigError(
                f"n_p={self.trainer.n_p} exceeds the trajectory count "
                f"n={self.sim.n} after scaling")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.heatmap_bins < 2:
            raise ConfigError("heatmap_bins must be >= 2")
        if self.localize_bins < 1 or self.localize_min_count < 1:
            raise ConfigError("localization bins and min_count must be >= 1")
        if self.experiment == "vanilla-surface" and not self.maturities_days:
            raise ConfigError("vanilla-surface needs at least one maturity")
        if not self.strikes:
            raise ConfigError("need at least one strike")

    @property
    def path_dependent(self):
        return self.state_mode == "path-dependent"

    @property
    def run_tag(self):
        """Artifact suffix; bermudan runs are tagged by state mode so a
        plain and a path-dependent run can share an output directory."""
        if self.experiment != "bermudan":
            return ""
        return "_pathdep" if self.path_dependent else "_plain"

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["sim"] = dataclasses.asdict(self.sim)
        out["trainer"] = dataclasses.asdict(self.trainer)
        return out


def _as_int(name, value):
    if isinstance(value, bool) or (isinstance(value, float)
                                   and not value.is_integer()):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, float):
        return int(value)
    if not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return value


def _check_known(section, data, known):
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {unknown}")


def _wrap_config_errors(section, builder, kwargs):
    try:
        return builder(**kwargs)
    except (ConfigError, ShapeError) as exc:
        raise ConfigError(f"{section} config: {exc}") from exc


def load_experiment_config(path, *, kind, out_dir, seed=None, scale=1,
                           state_mode=None, action_variant=None, interp=None,
                           shaping=None):
    """Read a JSON experiment config and apply the CLI overrides.

    ``kind`` is the subcommand's experiment; a conflicting kind in the
    file is an error. Relative surface paths resolve against the config
    file's directory, or against the output directory when no file is
    given. ``scale`` divides n and the run count, keeping n_p.
    """
    from .engine import SimConfig
    from .trainer import TrainerConfig

    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file {path} does not exist")
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        base_dir = os.path.dirname(os.path.abspath(path))
    else:
        data = {}
        base_dir = out_dir
    data = dict(data)

    file_kind = data.pop("experiment", None)
    if file_kind is not None and kind is not None and file_kind != kind:
        raise ConfigError(
            f"config file is for experiment {file_kind!r} but the command "
            f"runs {kind!r}")
    experiment = file_kind or kind
    if experiment is None:
        raise ConfigError("experiment kind is not specified anywhere")

    sim_data = data.pop("sim", {})
    _check_known("sim", sim_data, _SIM_DEFAULTS)
    sim_kwargs = dict(_SIM_DEFAULTS)
    sim_kwargs.update(sim_data)
    for name in _SIM_INT_FIELDS:
        sim_kwargs[name] = _as_int(f"sim.{name}", sim_kwargs[name])
    if seed is not None:
        sim_kwargs["seed"] = seed
    if scale < 1:
        raise ConfigError(f"--scale must be >= 1, got {scale}")
    sim_kwargs["n"] = max(1, sim_kwargs["n"] // scale)
    sim_kwargs["runs"] = max(1, sim_kwargs["runs"] // scale)

    trainer_data = data.pop("trainer", {})
    field_names = [f.name for f in dataclasses.fields(TrainerConfig)]
    _check_known("trainer", trainer_data, field_names)
    trainer_kwargs = dict(trainer_data)
    for name in _TRAINER_INT_FIELDS:
        if name in trainer_kwargs:
            trainer_kwargs[name] = _as_int(f"trainer.{name}",
                                           trainer_kwargs[name])
    for name in ("hidden", "value_hidden"):
        if name in trainer_kwargs:
            trainer_kwargs[name] = tuple(
                _as_int(f"trainer.{name}[]", h) for h in trainer_kwargs[name])
    if interp is not None:
        trainer_kwargs["interp"] = interp

    bermudan_data = data.pop("bermudan", {})
    _check_known("bermudan", bermudan_data,
                 ("k1", "k2", "weight", "fake_strike_mode"))
    amc_data = data.pop("amc", {})
    _check_known("amc", amc_data, ("degree", "use_frozen_vol"))
    localize_data = data.pop("localization", {})
    _check_known("localization", localize_data, ("bins", "min_count"))

    known_top = ("surface", "state_mode", "action_variant", "shaping",
                 "maturities_days", "strikes", "vega_weighted",
                 "checkpoint_every", "heatmap_bins")
    _check_known("top-level", data, known_top)

    surface = data.get("surface", "surface.json")
    if not os.path.isabs(surface):
        surface = os.path.normpath(os.path.join(base_dir, surface))

    default_strikes = (VANILLA_STRIKES if experiment == "vanilla-surface"
                       else BERMUDAN_STRIKES)
    cfg = ExperimentConfig(
        experiment=experiment,
        surface=surface,
        sim=_wrap_config_errors("sim", SimConfig, sim_kwargs),
        trainer=_wrap_config_errors("trainer", TrainerConfig, trainer_kwargs),
        state_mode=state_mode or data.get("state_mode", "plain"),
        action_variant=action_variant or data.get("action_variant", "A"),
        shaping=(shaping == "on" if shaping is not None
                 else bool(data.get("shaping", False))),
        maturities_days=tuple(
            _as_int("maturities_days[]", d)
            for d in data.get("maturities_days", VANILLA_MATURITIES)),
        strikes=tuple(float(k) for k in data.get("strikes", default_strikes)),
        vega_weighted=bool(data.get("vega_weighted", False)),
        bermudan_k1=float(bermudan_data.get("k1", 1.0)),
        bermudan_k2=float(bermudan_data.get("k2", 1.012)),
        bermudan_weight=float(bermudan_data.get("weight", 1.0)),
        fake_strike_mode=bermudan_data.get("fake_strike_mode", "delta"),
        amc_degree=_as_int("amc.degree", amc_data.get("degree", 8)),
        amc_use_frozen_vol=bool(amc_data.get("use_frozen_vol", False)),
        checkpoint_every=_as_int(
            "checkpoint_every", data.get("checkpoint_every", 50)),
        heatmap_bins=_as_int("heatmap_bins", data.get("heatmap_bins", 20)),
        localize_bins=_as_int(
            "localization.bins", localize_data.get("bins", 50)),
        localize_min_count=_as_int(
            "localization.min_count", localize_data.get("min_count", 10)),
        scale=scale,
    )
    cfg.require_valid()
    return cfg


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

def build_problem(cfg):
    """Load the surface and assemble the reward spec for the experiment.

    Returns (surface, reward spec, localization, reference vol fn). The
    vanilla experiment is referenced against a constant Black-Scholes
    vol at the surface's terminal ATM level; the bermudan experiment is
    referenced against (and localized to) the surface's local vol, with
    the reward spec's target filled in later from the reference episode.
    """
    from .engine import LocalizeConfig
    from .game import RewardSpec
    from .market import (dupire_local_vol, load_surface, make_target_set,
                         surface_implied_vol)
    from .pricing import AmcConfig, BermudanSpec

    surface = load_surface(cfg.surface)
    if abs(surface.spot - 1.0) > 1e-12:
        raise ConfigError(
            f"calibration assumes spot 1.0 but the surface has spot "
            f"{surface.spot}")
    sim = cfg.sim
    if cfg.experiment == "vanilla-surface":
        quotes = make_target_set(surface, cfg.maturities_days, cfg.strikes,
                                 vega_weighted=cfg.vega_weighted)
        spec = RewardSpec(steps=sim.steps, quotes=tuple(quotes),
                          delta=sim.delta)
        atm_vol = surface_implied_vol(surface, sim.t2_step * sim.delta,
                                      surface.spot)

        def reference_vol_fn(t_years, spots):
            return atm_vol

        return surface, spec, None, reference_vol_fn

    bermudan = _wrap_config_errors(
        "bermudan", BermudanSpec,
        dict(t1_step=sim.t1_step, t2_step=sim.t2_step, k1=cfg.bermudan_k1,
             k2=cfg.bermudan_k2, fake_strike_mode=cfg.fake_strike_mode))
    amc = AmcConfig(degree=cfg.amc_degree,
                    use_frozen_vol=cfg.amc_use_frozen_vol)
    # Placeholder target; the reference resolution replaces it with the
    # reference model's pooled max-European level before training.
    spec = RewardSpec(steps=sim.steps, bermudan=bermudan,
                      bermudan_weight=cfg.bermudan_weight,
                      bermudan_target_iv=1.0, shaping=cfg.shaping, amc=amc,
                      delta=sim.delta)
    t_floor = 0.5 * sim.delta

    def reference_vol_fn(t_years, spots):
        return dupire_local_vol(surface, max(t_years, t_floor), spots)

    localization = LocalizeConfig(local_vol_fn=reference_vol_fn,
                                  from_step=sim.t1_step,
                                  to_step=sim.t2_step - 1,
                                  n_bins=cfg.localize_bins,
                                  min_count=cfg.localize_min_count)
    return surface, spec, localization, reference_vol_fn


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_run_checkpoint(path, policy, value, meta, policy_adam=None,
                        value_adam=None):
    """Pack the nets (and optionally optimizer states) into one npz."""
    from . import nets

    blob = {}
    blob.update(nets.pack_mlp("policy", policy.net))
    if policy.log_std_param is not None:
        blob["policy.log_std_param"] = policy.log_std_param
    blob.update(nets.pack_mlp("value", value))
    if policy_adam is not None:
        blob.update(nets.pack_adam("policy_adam", policy_adam))
    if value_adam is not None:
        blob.update(nets.pack_adam("value_adam", value_adam))
    nets.save_checkpoint(path, blob, meta)


def load_run_checkpoint(path):
    """Inverse of save_run_checkpoint -> (policy, value, meta)."""
    from . import nets

    if not os.path.isfile(path):
        raise ConfigError(f"checkpoint file {path} does not exist")
    try:
        blob, meta = nets.load_checkpoint(path)
        policy = nets.GaussianPolicy(
            net=nets.unpack_mlp("policy", blob),
            action_dim=int(meta["action_dim"]),
            state_dependent_std=bool(meta.get("state_dependent_std", True)),
            log_std_param=blob.get("policy.log_std_param"))
        value = (nets.unpack_mlp("value", blob)
                 if "value.sizes" in blob else None)
    except (KeyError, ValueError) as exc:
        raise ConfigError(
            f"checkpoint file {path} is not readable: {exc}") from exc
    return policy, value, meta


def _run_meta(cfg, iteration):
    from .trainer import action_dim_for

    return {
        "format": 1,
        "experiment": cfg.experiment,
        "state_mode": cfg.state_mode,
        "action_variant": cfg.action_variant,
        "action_dim": action_dim_for(cfg.action_variant),
        "state_dependent_std": True,
        "shaping": cfg.shaping,
        "iteration": iteration,
        "seed": cfg.sim.seed,
        "sigma_init": cfg.sim.sigma_init,
        "steps": cfg.sim.steps,
        "t1_step": cfg.sim.t1_step,
        "t2_step": cfg.sim.t2_step,
        "delta": cfg.sim.delta,
    }


# ---------------------------------------------------------------------------
# Per-iteration artifact streaming
# ---------------------------------------------------------------------------

class ArtifactBook:
    """Accumulates training artifacts and flushes them atomically.

    History, reward-trace and switch CSVs are rewritten in full after
    every iteration (atomic replace, never a truncated tail); net
    checkpoints are written every ``checkpoint_every`` iterations.
    """

    def __init__(self, cfg, out_dir, policy, value):
        self.cfg = cfg
        self.out_dir = out_dir
        self.policy = policy
        self.value = value
        self.tag = cfg.run_tag
        self.history_rows = []
        self.trace_rows = []
        self.switch_rows = []

    def path(self, stem, ext="csv"):
        return os.path.join(self.out_dir, f"{stem}{self.tag}.{ext}")

    def on_iteration(self, row, episode, breakdown):
        it = row["iteration"]
        self.history_rows.append((
            it, row["game_value"], row["game_se"],
            row.get("kl", float("nan")),
            row.get("clip_fraction", float("nan")),
            row.get("policy_loss", float("nan")),
            row.get("value_loss_before", float("nan")),
            row["elapsed"]))
        for b, per_run in enumerate(breakdown.step_rewards):
            for sr in per_run:
                for comp in sr.components:
                    self.trace_rows.append(
                        (it, b, sr.step, comp.option_id, comp.model_value,
                         comp.target_iv, -comp.penalty))
        if "switch_volpts" in row:
            self.switch_rows.append(
                (it, row["switch_volpts"], row["switch_se_volpts"]))
        every = self.cfg.checkpoint_every
        if every and (it + 1) % every == 0:
            name = f"checkpoint{self.tag}_iter{it + 1:05d}.npz"
            save_run_checkpoint(os.path.join(self.out_dir, name),
                                self.policy, self.value,
                                _run_meta(self.cfg, it))
        self.flush()

    def flush(self):
        write_csv(self.path("history"), HISTORY_COLUMNS, self.history_rows)
        write_csv(self.path("trace"), TRACE_COLUMNS, self.trace_rows)
        if self.cfg.experiment == "bermudan":
            write_csv(self.path("switch"), SWITCH_COLUMNS, self.switch_rows)


# ---------------------------------------------------------------------------
# Derived artifacts (smile, heat map, pricing report)
# ---------------------------------------------------------------------------

def _smile_entries(cfg, spec, surface):
    """(step, t_days, t_years, strike, target_iv) rows for the smile CSV."""
    from .market import surface_implied_vol

    if cfg.experiment == "vanilla-surface":
        return [(int(round(q.t_years / spec.delta)), q.t_days, q.t_years,
                 q.strike, q.target_iv) for q in spec.quotes]
    entries = []
    for step in (cfg.sim.t1_step, cfg.sim.t2_step):
        t_years = step * spec.delta
        t_days = int(round(t_years * 252.0))
        for strike in cfg.strikes:
            target = surface_implied_vol(surface, t_years, strike)
            entries.append((step, t_days, t_years, strike, target))
    return entries


def _smile_rows(episode, entries, forward=1.0):
    """Pooled-trajectory implied vols against their targets."""
    from .game import iv_or_edge
    from .pricing import mc_vanilla_price

    rows = []
    for step, t_days, t_years, strike, target in entries:
        pooled = episode.spots[:, step, :].reshape(-1)
        price, _ = mc_vanilla_price(pooled, strike)
        iv, _ = iv_or_edge(price, forward, strike, t_years)
        rows.append((t_days, strike, iv, target, iv - target))
    return rows


def _heatmap_rows(episode, t1_step, t2_step, n_bins):
    """Mean raw/localized vol on a (ln S_t1, ln S_t) grid, t in (t1, t2)."""
    import numpy as np

    ts = range(t1_step + 1, t2_step)
    x_t1 = np.log(episode.spots[:, t1_step, :])
    xs, ys, raw, localized = [], [], [], []
    for t in ts:
        xs.append(x_t1.ravel())
        ys.append(np.log(episode.spots[:, t, :]).ravel())
        raw.append(episode.vols[:, t, :].ravel())
        localized.append(episode.eff_vols[:, t, :].ravel())
    if not xs:
        return []
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    raw = np.concatenate(raw)
    localized = np.concatenate(localized)

    def edges(values):
        lo, hi = np.quantile(values, (0.005, 0.995))
        if hi - lo < 1e-12:
            lo, hi = lo - 1e-6, hi + 1e-6
        return np.linspace(lo, hi, n_bins + 1)

    ex, ey = edges(x), edges(y)
    ix = np.clip(np.searchsorted(ex, x, side="right") - 1, 0, n_bins - 1)
    iy = np.clip(np.searchsorted(ey, y, side="right") - 1, 0, n_bins - 1)
    flat = ix * n_bins + iy
    counts = np.bincount(flat, minlength=n_bins * n_bins)
    sums_raw = np.bincount(flat, weights=raw, minlength=n_bins * n_bins)
    sums_loc = np.bincount(flat, weights=localized,
                           minlength=n_bins * n_bins)
    centers_x = 0.5 * (ex[:-1] + ex[1:])
    centers_y = 0.5 * (ey[:-1] + ey[1:])
    rows = []
    for i in range(n_bins):
        for j in range(n_bins):
            c = int(counts[i * n_bins + j])
            mean_raw = sums_raw[i * n_bins + j] / c if c else float("nan")
            mean_loc = sums_loc[i * n_bins + j] / c if c else float("nan")
            rows.append((centers_x[i], centers_y[j], c, mean_raw, mean_loc))
    return rows


def _pricing_report(cfg, spec, episode, breakdown):
    """(header, rows) for the pricing report CSV."""
    seed = cfg.sim.seed
    if cfg.experiment == "bermudan":
        header = ("seed", "run", "bermudan", "se_bermudan", "eu1", "se_eu1",
                  "eu2", "se_eu2", "max_eu", "switch_value_volpts",
                  "se_switch_volpts")
        rows = [(seed, b, r.bermudan, r.bermudan_se, r.eu1, r.eu1_se, r.eu2,
                 r.eu2_se, r.max_eu, r.switch_volpts, r.switch_se_volpts)
                for b, r in enumerate(breakdown.bermudan_results)]
        return header, rows

    from .game import iv_or_edge
    from .pricing import mc_vanilla_price

    header = ("seed", "option_id", "t_days", "strike", "model_value",
              "model_iv", "target_iv", "error")
    rows = []
    for q in spec.quotes:
        step = int(round(q.t_years / spec.delta))
        pooled = episode.spots[:, step, :].reshape(-1)
        price, _ = mc_vanilla_price(pooled, q.strike)
        iv, _ = iv_or_edge(price, spec.forward, q.strike, q.t_years)
        rows.append((seed, f"vanilla_{q.t_days}d_{q.strike:g}", q.t_days,
                     q.strike, price, iv, q.target_iv, iv - q.target_iv))
    return header, rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_calibrate(args, kind):
    from . import nets
    from . import trainer as trainer_mod
    from .engine import Stream, noise_stream

    cfg = load_experiment_config(
        args.config, kind=kind, out_dir=args.out, seed=args.seed,
        scale=args.scale, state_mode=args.state_mode,
        action_variant=args.action_variant, interp=args.interp,
        shaping=getattr(args, "shaping", None))
    os.makedirs(args.out, exist_ok=True)
    surface, spec, localization, reference_vol_fn = build_problem(cfg)
    tag = cfg.run_tag

    resolved = cfg.to_dict()
    resolved["out"] = os.path.abspath(args.out)
    write_json(os.path.join(args.out, f"config_resolved{tag}.json"), resolved)
    print(f"resolved: experiment={cfg.experiment} n={cfg.sim.n} "
          f"runs={cfg.sim.runs} steps={cfg.sim.steps} delta={cfg.sim.delta:g} "
          f"seed={cfg.sim.seed} n_p={cfg.trainer.n_p} "
          f"state_mode={cfg.state_mode} variant={cfg.action_variant} "
          f"interp={cfg.trainer.interp} shaping={cfg.shaping}")

    state_dim = 5 if cfg.path_dependent else 3
    policy = trainer_mod.init_policy(
        state_dim, cfg.action_variant, cfg.sim.sigma_init, cfg.trainer,
        noise_stream(cfg.sim.seed, Stream.SGD, iteration=0, run=0, step=1))
    value = nets.mlp_init(
        (state_dim, *cfg.trainer.value_hidden, 1),
        noise_stream(cfg.sim.seed, Stream.SGD, iteration=0, run=0, step=2))
    book = ArtifactBook(cfg, args.out, policy, value)

    result = trainer_mod.marlvol_train(
        cfg.sim, spec, cfg.trainer, path_dependent=cfg.path_dependent,
        action_variant=cfg.action_variant, localization=localization,
        reference_vol_fn=reference_vol_fn, policy=policy, value=value,
        callback=book.on_iteration)
    book.flush()

    meta = _run_meta(cfg, result.iterations - 1)
    checkpoint_path = os.path.join(args.out, f"checkpoint{tag}.npz")
    save_run_checkpoint(checkpoint_path, policy, value, meta,
                        policy_adam=result.policy_adam,
                        value_adam=result.value_adam)

    episode, _, gv = trainer_mod.evaluate_policy(
        policy, cfg.sim, result.spec, path_dependent=cfg.path_dependent,
        action_variant=cfg.action_variant, localization=localization)
    write_csv(book.path("smile"), SMILE_COLUMNS,
              _smile_rows(episode, _smile_entries(cfg, result.spec, surface)))

    last = result.history[-1]
    print(f"final game value {last['game_value']:.6e} "
          f"(se {last['game_se']:.2e}) after {result.iterations} iterations "
          f"(stop: {result.stop_reason})")
    if cfg.experiment == "bermudan":
        print(f"final switch value {last['switch_volpts']:.4f} vol points "
              f"(se {last['switch_se_volpts']:.4f})")
        heatmap = _heatmap_rows(episode, cfg.sim.t1_step, cfg.sim.t2_step,
                                cfg.heatmap_bins)
        write_csv(book.path("heatmap"), HEATMAP_COLUMNS, heatmap)
    else:
        print(f"worst quote error {last['max_quote_error'] * 100:.3f} "
              f"vol points; frozen-policy game value {gv.value:.6e}")
    names = sorted(os.path.basename(p) for p in (
        book.path("history"), book.path("trace"), book.path("smile"),
        checkpoint_path))
    print(f"artifacts in {args.out}: {', '.join(names)}"
          + (", switch/heatmap CSVs" if cfg.experiment == "bermudan" else ""))
    return EXIT_OK


def _cmd_calibrate_vanilla(args):
    return _cmd_calibrate(args, "vanilla-surface")


def _cmd_calibrate_bermudan(args):
    return _cmd_calibrate(args, "bermudan")


def _cmd_evaluate(args):
    from . import trainer as trainer_mod

    policy, value, meta = load_run_checkpoint(args.checkpoint)
    kind = meta.get("experiment")
    cfg = load_experiment_config(
        args.config, kind=kind, out_dir=args.out, seed=args.seed,
        scale=args.scale,
        state_mode=args.state_mode or meta.get("state_mode"),
        action_variant=args.action_variant or meta.get("action_variant"))
    surface, spec, localization, reference_vol_fn = build_problem(cfg)
    spec, _ = trainer_mod.resolve_reference(cfg.sim, spec, reference_vol_fn)

    iteration_tag = args.iteration_tag
    if iteration_tag is None:
        iteration_tag = int(meta.get("iteration", 0))
    episode, breakdown, gv = trainer_mod.evaluate_policy(
        policy, cfg.sim, spec, path_dependent=cfg.path_dependent,
        action_variant=cfg.action_variant, localization=localization,
        trainer=cfg.trainer, exploration=args.stochastic,
        iteration_tag=iteration_tag)

    os.makedirs(args.out, exist_ok=True)
    write_csv(os.path.join(args.out, "eval_smile.csv"), SMILE_COLUMNS,
              _smile_rows(episode, _smile_entries(cfg, spec, surface)))
    header, rows = _pricing_report(cfg, spec, episode, breakdown)
    write_csv(os.path.join(args.out, "pricing_report.csv"), header, rows)
    write_json(os.path.join(args.out, "eval_summary.json"), {
        "game_value": gv.value,
        "game_value_se": gv.se,
        "runs": gv.runs,
        "mode": "stochastic" if args.stochastic else "deterministic",
        "iteration_tag": iteration_tag if args.stochastic else None,
        "checkpoint": os.path.abspath(args.checkpoint),
    })
    print(f"game value {gv.value:.6e} (se {gv.se:.2e}) over {gv.runs} runs "
          f"[{'stochastic' if args.stochastic else 'deterministic'}]")
    print(f"artifacts in {args.out}: eval_smile.csv, pricing_report.csv, "
          f"eval_summary.json")
    return EXIT_OK


def _cmd_make_surface(args):
    from .market import (flat_surface, make_target_set, save_surface,
                         skewed_surface)

    if args.kind == "flat":
        surface = flat_surface(args.vol, pillar_days=tuple(args.days),
                               spot=args.spot)
    else:
        surface = skewed_surface(atm_vol=args.atm_vol, skew=args.skew,
                                 pillar_days=tuple(args.days),
                                 spot=args.spot)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, args.name)
    save_surface(path, surface)
    print(f"wrote {path}")
    if args.targets:
        quotes = make_target_set(surface, VANILLA_MATURITIES, VANILLA_STRIKES)
        write_csv(os.path.join(args.out, "targets.csv"),
                  ("t_days", "strike", "target_iv", "weight"),
                  [(q.t_days, q.strike, q.target_iv, q.weight)
                   for q in quotes])
        print(f"wrote {os.path.join(args.out, 'targets.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def _seed_arg(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return value


def _scale_arg(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("scale must be >= 1")
    return value


def _add_run_options(p, default_out, shaping=False):
    p.add_argument("--config", metavar="PATH",
                   help="JSON experiment config (defaults apply without it)")
    p.add_argument("--seed", type=_seed_arg, default=None,
                   help="override the simulation seed")
    p.add_argument("--scale", type=_scale_arg, default=1, metavar="N",
                   help="divide the trajectory count and the run count by N "
                        "(the basis-player count is kept)")
    p.add_argument("--out", default=default_out, metavar="DIR",
                   help="output directory (created if missing)")
    p.add_argument("--state-mode", choices=STATE_MODES, default=None)
    p.add_argument("--action-variant", choices=("A", "B"), default=None)
    p.add_argument("--interp", choices=("linear", "knn"), default=None,
                   help="exploration interpolation mode")
    if shaping:
        p.add_argument("--shaping", choices=("on", "off"), default=None,
                       help="telescoping per-step proxy rewards")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="marlvol",
        description="Calibrate Monte Carlo volatility models by training a "
                    "shared policy over cooperating trajectories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate-vanilla",
                       help="fit a vanilla option surface")
    _add_run_options(p, os.path.join("runs", "vanilla"))
    p.set_defaults(func=_cmd_calibrate_vanilla)

    p = sub.add_parser("calibrate-bermudan",
                       help="minimize a two-date bermudan under localization")
    _add_run_options(p, os.path.join("runs", "bermudan"), shaping=True)
    p.set_defaults(func=_cmd_calibrate_bermudan)

    p = sub.add_parser("evaluate",
                       help="price with a frozen checkpointed policy")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    _add_run_options(p, os.path.join("runs", "eval"))
    p.add_argument("--stochastic", action="store_true",
                   help="replay the training-time exploration instead of "
                        "acting the policy mean")
    p.add_argument("--iteration-tag", type=int, default=None, metavar="N",
                   help="exploration iteration to replay (default: the "
                        "checkpoint's final training iteration)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("make-surface",
                       help="write a synthetic target surface file")
    p.add_argument("--kind", choices=("flat", "skewed"), default="flat")
    p.add_argument("--vol", type=float, default=0.2,
                   help="flat surface implied vol")
    p.add_argument("--atm-vol", type=float, default=0.14,
                   help="skewed surface ATM vol")
    p.add_argument("--skew", type=float, default=-0.5,
                   help="d(implied vol)/d(log-moneyness) at the money")
    p.add_argument("--days", type=int, nargs="+", default=[21, 51],
                   help="pillar maturities in days")
    p.add_argument("--spot", type=float, default=1.0)
    p.add_argument("--out", default=os.path.join("runs", "surface"),
                   metavar="DIR")
    p.add_argument("--name", default="surface.json",
                   help="surface file name inside the output directory")
    p.add_argument("--targets", action="store_true",
                   help="also export the default quote grid as targets.csv")
    p.set_defaults(func=_cmd_make_surface)
    return parser


def main(argv=None):
    try:
        apply_thread_cap()
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            datefmt="%H:%M:%S")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
