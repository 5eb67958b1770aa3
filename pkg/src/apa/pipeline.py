"""The five pipeline commands and the on-disk artifact layout.

Layout under ``cfg.out``::

    prepare/<prepare-key>/   dataset, codec, denoiser, zoo checkpoints, benchmark.json, prepare.json
    adapters/<align-key>/    one adapter checkpoint per benchmark image
    runs/<run-key>/          config.json, results/<id>.json, images/<id>.png, attack.json, report.*
    sweeps/<sweep-key>/      summary.json, summary.txt, summary.png

Every JSON output is written with sorted keys, so re-running a command with the
same config produces byte-identical files.
"""

from __future__ import annotations

import concurrent.futures as cf
import logging
import multiprocessing as mp
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from apa import evaluation
from apa.attack import AttackConfig, one_stage_baseline, run_attack
from apa.config import ExperimentConfig
from apa.data import make_dataset
from apa.diffusion.codec import Codec, train_autoencoder
from apa.diffusion.network import Denoiser
from apa.diffusion.schedule import NoiseSchedule
from apa.diffusion.training import heldout_loss, train_denoiser
from apa.errors import APAError, ArtifactError, DegenerateConfigError, InvalidArgumentError
from apa.io import (
    arrays_to_state,
    config_hash,
    load_checkpoint,
    load_png,
    read_json,
    save_checkpoint,
    save_png,
    state_to_arrays,
    write_json,
)
from apa.models import Zoo, build, train_classifier
from apa.vca import LoRAAdapter, vca_finetune

log = logging.getLogger(__name__)

SWEEP_PARAMS = {
    "T": "attack.T",
    "T_a": "attack.T_a",
    "lambda": "one_stage_lambda",
    "eps_a": "attack.eps_a",
    "mu": "attack.mu",
}


def image_id(index):
    return f"eval-{index:04d}"


def _index(iid):
    try:
        prefix, num = iid.split("-")
        if prefix != "eval":
            raise ValueError
        return int(num)
    except ValueError:
        raise InvalidArgumentError(f"malformed image id {iid!r}; expected 'eval-NNNN'") from None


# --------------------------------------------------------------------------- prepare


def prepare_dir(cfg: ExperimentConfig):
    return Path(cfg.out) / "prepare" / cfg.prepare_key()


def _checked(stem, kind, key):
    """Load an existing checkpoint, refusing one written under another config."""
    arrays, manifest = load_checkpoint(stem, kind)
    found = manifest["meta"].get("prepare_key")
    if found != key:
        raise ArtifactError(
            f"{Path(stem).with_suffix('.json')} was written for prepare key {found!r}, not {key!r}; "
            "remove the directory or restore the matching config",
            Path(stem).with_suffix(".json"),
        )
    return arrays, manifest


def _exists(stem):
    return Path(stem).with_suffix(".json").exists() or Path(stem).with_suffix(".npz").exists()


def cmd_prepare(cfg: ExperimentConfig):
    """Generate the dataset and train the codec, denoiser and zoo (idempotent).

    Returns a summary dict with ``trained`` listing what was (re)built.
    """
    d = prepare_dir(cfg)
    key = cfg.prepare_key()
    stamp = d / "prepare.json"
    if stamp.exists():
        info = read_json(stamp)
        if info.get("prepare_key") != key:
            raise ArtifactError(f"{stamp} belongs to prepare key {info.get('prepare_key')!r}, not {key!r}", stamp)
        load_context(cfg)  # validates every manifest and checksum
        return {**info, "trained": []}

    trained = []
    meta = {"prepare_key": key}
    ds_cfg = cfg.dataset
    if _exists(d / "dataset"):
        _checked(d / "dataset", "dataset", key)
    else:
        ds = make_dataset(ds_cfg.n_train, ds_cfg.n_eval, ds_cfg.seed)
        save_checkpoint(d / "dataset", {"train_x": ds["train"][0], "train_y": ds["train"][1],
                                        "eval_x": ds["eval"][0], "eval_y": ds["eval"][1]}, "dataset", meta)
        trained.append("dataset")
    data = _load_dataset(d, key)

    codec = Codec(cfg.denoiser.codec)
    if cfg.denoiser.codec != "identity":
        if _exists(d / "codec"):
            arrays, _ = _checked(d / "codec", "codec", key)
            codec.load_state_dict(arrays_to_state(arrays))
        else:
            train_autoencoder(codec, data["train"][0], seed=cfg.denoiser.seed)
            save_checkpoint(d / "codec", state_to_arrays(codec), "codec", {**meta, "config": codec.config})
            trained.append("codec")
    codec.eval().requires_grad_(False)

    dn = cfg.denoiser
    if _exists(d / "denoiser"):
        arrays, manifest = _checked(d / "denoiser", "denoiser", key)
        den_info = manifest["meta"]
    else:
        with torch.no_grad():
            lat = codec.encode(data["train"][0])
            lat_eval = codec.encode(data["eval"][0])
        den, rec = train_denoiser(
            lat, data["train"][1], epochs=dn.epochs, lr=dn.lr, batch_size=dn.batch_size, seed=dn.seed,
            p_uncond=dn.p_uncond,
            net_kwargs=dict(base=dn.base, cond_dim=dn.cond_dim, train_steps=cfg.schedule.train_steps),
        )
        den_info = {**meta, "config": den.config, "heldout_loss": heldout_loss(den, lat_eval),
                    "final_train_loss": rec.losses[-1] if rec.losses else None}
        save_checkpoint(d / "denoiser", state_to_arrays(den), "denoiser", den_info)
        trained.append("denoiser")

    accuracies = {}
    for name, spec in cfg.zoo.specs().items():
        stem = d / "zoo" / name
        if _exists(stem):
            _, manifest = _checked(stem, "classifier", key)
            accuracies[name] = manifest["meta"]["spec"]["accuracy"]
            continue
        model, spec = train_classifier(spec, data, gate=cfg.zoo.gate)
        save_checkpoint(stem, state_to_arrays(model), "classifier", {**meta, "spec": spec.to_dict()})
        accuracies[name] = spec.accuracy
        trained.append(f"zoo/{name}")

    ctx = load_context(cfg, require_benchmark=False)
    bench = select_benchmark(ctx, cfg.eval.benchmark_size, seed=cfg.dataset.seed)
    write_json(d / "benchmark.json", bench)

    info = {
        "prepare_key": key,
        "heldout_loss": den_info["heldout_loss"],
        "accuracies": accuracies,
        "benchmark_size": len(bench["ids"]),
    }
    write_json(stamp, info)
    return {**info, "trained": trained}


def select_benchmark(ctx, size, seed=0):
    """``size`` eval images correctly classified by every zoo model, chosen by
    a seeded permutation and listed in index order."""
    x, y = ctx.data["eval"]
    ok = torch.ones(x.shape[0], dtype=torch.bool)
    for m in ctx.zoo.all_models.values():
        ok &= ~evaluation.misclassified(m, x, y)
    eligible = ok.nonzero().flatten().numpy()
    if eligible.size < size:
        raise DegenerateConfigError(
            f"only {eligible.size} eval images are classified correctly by every zoo model; need {size}"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.permutation(eligible)[:size])
    return {"ids": [image_id(int(i)) for i in chosen], "indices": [int(i) for i in chosen],
            "labels": [int(y[i]) for i in chosen]}


@dataclass
class Context:
    cfg: ExperimentConfig
    data: dict
    codec: Codec
    denoiser: Denoiser
    zoo: Zoo
    benchmark: Optional[dict]

    def images(self, ids):
        idx = [_index(i) for i in ids]
        x, y = self.data["eval"]
        return x[idx], y[idx]


def _load_dataset(d, key):
    arrays, _ = _checked(d / "dataset", "dataset", key)
    t = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
    return {"train": (t["train_x"], t["train_y"]), "eval": (t["eval_x"], t["eval_y"])}


def load_context(cfg: ExperimentConfig, require_benchmark=True):
    """Load every prepared artifact, validating manifests and checksums."""
    d = prepare_dir(cfg)
    key = cfg.prepare_key()
    if not (d / "denoiser.json").exists():
        raise ArtifactError(f"no trained denoiser under {d}; run `apa prepare` with this config first", d)
    data = _load_dataset(d, key)
    codec = Codec(cfg.denoiser.codec)
    if cfg.denoiser.codec != "identity":
        arrays, _ = _checked(d / "codec", "codec", key)
        codec.load_state_dict(arrays_to_state(arrays))
    codec.eval().requires_grad_(False)
    arrays, manifest = _checked(d / "denoiser", "denoiser", key)
    den = Denoiser(**manifest["meta"]["config"])
    den.load_state_dict(arrays_to_state(arrays))
    den.eval().requires_grad_(False)
    models = {}
    specs = {}
    for name, spec in cfg.zoo.specs().items():
        arrays, manifest = _checked(d / "zoo" / name, "classifier", key)
        m = build(spec.arch, spec.num_classes)
        m.load_state_dict(arrays_to_state(arrays))
        m.eval().requires_grad_(False)
        models[name] = m
        specs[name] = manifest["meta"]["spec"]
    zoo = Zoo(models.pop("substitute"), models, specs)
    bench = None
    if require_benchmark:
        bench = read_json(d / "benchmark.json")
    return Context(cfg, data, codec, den, zoo, bench)


def _resolve_ids(ctx, ids):
    known = ctx.benchmark["ids"]
    if ids is None:
        return list(known)
    missing = [i for i in ids if i not in known]
    if missing:
        raise InvalidArgumentError(f"unknown image ids {missing}; benchmark ids look like {known[0]!r}")
    return list(ids)


def _sched(cfg, T):
    return NoiseSchedule.linear(T, train_steps=cfg.schedule.train_steps)


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _dispatch(fn, cfg, jobs):
    """Run ``fn(cfg_dict, job)`` for every job, in-process or on a worker pool."""
    if cfg.workers == 1 or len(jobs) <= 1:
        return [fn(cfg.to_dict(), job) for job in jobs]
    with cf.ProcessPoolExecutor(max_workers=cfg.workers, mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(fn, [cfg.to_dict()] * len(jobs), jobs))


# --------------------------------------------------------------------------- align


def adapter_dir(cfg: ExperimentConfig):
    return Path(cfg.out) / "adapters" / cfg.align_key()


def _vca_seed(cfg, iid):
    return cfg.vca.seed * 100003 + _index(iid)


def _align_chunk(cfg_dict, ids):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ctx = load_context(cfg)
    x, _ = ctx.images(ids)
    sched = _sched(cfg, cfg.vca.T)
    adapter, _ = vca_finetune(ctx.denoiser, x, cfg.vca, sched, ctx.codec, seeds=[_vca_seed(cfg, i) for i in ids])
    d = adapter_dir(cfg)
    for k, iid in enumerate(ids):
        save_checkpoint(d / iid, adapter.select(k).to_arrays(), "adapter",
                        {"align_key": cfg.align_key(), "image_id": iid, "rank": adapter.rank, "scale": adapter.scale})
    return ids


def cmd_align(cfg: ExperimentConfig, ids=None):
    """Fit (or reuse) one stage-1 adapter per requested benchmark image."""
    ctx = load_context(cfg)
    ids = _resolve_ids(ctx, ids)
    d = adapter_dir(cfg)
    todo = [i for i in ids if not (d / f"{i}.json").exists()]
    for i in ids:
        if i not in todo:
            load_adapters(cfg, [i])  # refuse corrupt leftovers
    done = [i for batch in _dispatch(_align_chunk, cfg, _chunks(todo, cfg.eval.chunk_size)) for i in batch]
    return {"align_key": cfg.align_key(), "aligned": done, "reused": [i for i in ids if i not in todo]}


def load_adapters(cfg, ids):
    d = adapter_dir(cfg)
    parts = []
    for iid in ids:
        stem = d / iid
        if not stem.with_suffix(".json").exists():
            raise ArtifactError(f"no adapter for {iid} under {d}; run `apa align` first or pass --no-vca", stem)
        arrays, manifest = load_checkpoint(stem, "adapter")
        meta = manifest["meta"]
        if meta.get("align_key") != cfg.align_key():
            raise ArtifactError(f"{stem}.json was fitted under another alignment config", stem)
        parts.append(LoRAAdapter.from_arrays(arrays, meta["rank"], meta["scale"]))
    return LoRAAdapter.stack(parts)


# --------------------------------------------------------------------------- attack


def run_dir(cfg: ExperimentConfig, run_id=None):
    return Path(cfg.out) / "runs" / (run_id or cfg.run_key())


def _attack_batch(cfg, ctx, ids):
    x, y = ctx.images(ids)
    sched = _sched(cfg, cfg.attack.T)
    if cfg.one_stage_lambda is not None:
        return one_stage_baseline(x, y, ctx.denoiser, ctx.zoo.substitute, cfg.attack, ctx.codec,
                                  cfg.one_stage_lambda, augmenter=cfg.augment, sched=sched)
    adapter = load_adapters(cfg, ids) if cfg.use_vca else None
    return run_attack(x, y, ctx.denoiser, adapter, ctx.zoo.substitute, cfg.attack, ctx.codec,
                      augmenter=cfg.augment, sched=sched)


def _write_results(cfg, ids, res, d):
    for k, iid in enumerate(ids):
        rec = {"image_id": iid, "config_hash": cfg.run_key(), **res.select(k), "warnings": res.warnings,
               "error": res.error, "image": f"images/{iid}.png"}
        save_png(res.x_adv[k], d / "images" / f"{iid}.png")
        write_json(d / "results" / f"{iid}.json", rec)


def _attack_chunk(cfg_dict, ids):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ctx = load_context(cfg)
    d = run_dir(cfg)
    try:
        _write_results(cfg, ids, _attack_batch(cfg, ctx, ids), d)
        return []
    except APAError as exc:
        if len(ids) == 1:
            write_json(d / "results" / f"{ids[0]}.json",
                       {"image_id": ids[0], "config_hash": cfg.run_key(), "error": f"{type(exc).__name__}: {exc}"})
            return list(ids)
        log.warning("batch attack failed (%s); retrying images one at a time", exc)
    failed = []
    for iid in ids:
        failed += _attack_chunk(cfg_dict, [iid])
    return failed


def cmd_attack(cfg: ExperimentConfig, ids=None):
    """Attack the requested benchmark images; a failing image does not stop the rest."""
    ctx = load_context(cfg)
    ids = _resolve_ids(ctx, ids)
    if cfg.use_vca and cfg.one_stage_lambda is None:
        load_adapters(cfg, ids)  # fail fast with an actionable message
    d = run_dir(cfg)
    write_json(d / "config.json", {"run_key": cfg.run_key(), "prepare_key": cfg.prepare_key(),
                                   "align_key": cfg.align_key(), "config": _snapshot(cfg)})
    failed = [i for batch in _dispatch(_attack_chunk, cfg, _chunks(ids, cfg.eval.chunk_size)) for i in batch]
    wb = sum(bool(read_json(d / "results" / f"{i}.json").get("white_box")) for i in ids if i not in failed)
    summary = {"run_key": cfg.run_key(), "ids": ids, "failed": failed, "white_box_successes": wb}
    write_json(d / "attack.json", summary)
    return summary


def _snapshot(cfg):
    d = cfg.to_dict()
    d.pop("out")
    d.pop("workers")
    return d


# --------------------------------------------------------------------------- eval


def cmd_eval(cfg: ExperimentConfig, run_id=None):
    """Score a finished attack run from its stored PNGs and write the reports."""
    d = run_dir(cfg, run_id)
    summary = read_json(d / "attack.json")
    ctx = load_context(cfg)
    ok = [i for i in summary["ids"] if i not in summary["failed"]]
    if not ok:
        raise DegenerateConfigError(f"run {d} has no successfully attacked images")
    x, y = ctx.images(ok)
    x_adv = torch.stack([load_png(d / "images" / f"{i}.png") for i in ok])
    rep = evaluation.evaluate(x, x_adv, y, ok, ctx.zoo, cfg.eval.probe, config_hash=summary["run_key"])
    out = rep.to_dict()
    out["failed"] = summary["failed"]
    write_json(d / "report.json", out)
    (d / "report.txt").write_text(rep.table())
    (d / "report.csv").write_text(rep.csv())
    rewards = np.array([read_json(d / "results" / f"{i}.json")["rewards"] for i in ok])
    _plot_rewards(rewards, d / "rewards.png")
    return out


def _plot_rewards(rewards, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(np.arange(rewards.shape[1]), rewards.mean(0), marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean substitute reward")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- sweep


def sweep_config(cfg: ExperimentConfig, param, value):
    if param not in SWEEP_PARAMS:
        raise InvalidArgumentError(f"cannot sweep {param!r}; valid parameters: {sorted(SWEEP_PARAMS)}")
    if param == "lambda":
        return replace(cfg, one_stage_lambda=float(value))
    field_name = SWEEP_PARAMS[param].split(".")[1]
    cast = int if param in ("T", "T_a") else float
    kw = cfg.attack.to_dict()
    kw[field_name] = cast(value)
    return replace(cfg, attack=AttackConfig(**kw))


def cmd_sweep(cfg: ExperimentConfig, param, values, ids=None):
    """One attack + eval per value with shared seeds; summary table and plot."""
    if not values:
        raise InvalidArgumentError("sweep needs at least one value")
    rows = []
    for v in values:
        c = sweep_config(cfg, param, v)
        if not run_dir(c).joinpath("attack.json").exists():
            cmd_attack(c, ids)
        rep = cmd_eval(c)
        rows.append({"value": v, "run_key": c.run_key(), "white_box_asr": rep["asr"]["substitute"],
                     "black_box_asr": rep["black_box_asr"], "mean_ssim": rep["mean_ssim"],
                     "mean_perceptual": rep["mean_perceptual"]})
    d = Path(cfg.out) / "sweeps" / config_hash({"base": cfg.run_key(), "param": param, "values": list(values)})
    summary = {"param": param, "rows": rows}
    write_json(d / "summary.json", summary)
    lines = [f"{param:>8}{'white':>8}{'black':>8}{'SSIM':>8}{'perc.':>8}"]
    lines += [f"{r['value']!s:>8}{r['white_box_asr']:>8.1f}{r['black_box_asr']:>8.2f}{r['mean_ssim']:>8.3f}"
              f"{r['mean_perceptual']:>8.4f}" for r in rows]
    (d / "summary.txt").write_text("\n".join(lines) + "\n")
    _plot_sweep(rows, param, d / "summary.png")
    return {**summary, "dir": str(d)}


def _plot_sweep(rows, param, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [str(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(xs, [r["black_box_asr"] for r in rows], marker="o", label="black-box ASR")
    ax.set_xlabel(param)
    ax.set_ylabel("ASR (%)")
    ax2 = ax.twinx()
    ax2.plot(xs, [r["mean_ssim"] for r in rows], marker="s", color="tab:orange", label="SSIM")
    ax2.set_ylabel("SSIM")
    fig.legend(loc="upper center", ncol=2, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def load_bench(cfg: ExperimentConfig, ids=None, with_adapters=True):
    """In-memory benchmark for ``evaluation.run_ablation_grid``."""
    ctx = load_context(cfg)
    ids = _resolve_ids(ctx, ids)
    x, y = ctx.images(ids)
    adapter = load_adapters(cfg, ids) if with_adapters else None
    return evaluation.Bench(x=x, y=y, ids=ids, denoiser=ctx.denoiser, codec=ctx.codec, zoo=ctx.zoo,
                            adapter=adapter, probe=cfg.eval.probe, augmenter=cfg.augment)
