"""Stage orchestration with persisted, hash-stamped artifacts.

Output layout under the run directory::

    config.yaml                 effective configuration
    stages/<stage>.json         completion markers (config hash, seed, timings)
    data/process.bin            sampled token sequences and beliefs
    lm.bin                      transformer weights
    activations/<src>.bgad      residual dumps (+ .meta sidecars), logprobs.bgad
    sae/<setting>.bin           one SAE per (source, k)
    clusters/<setting>/         clusters.csv, bases.bin, nulls.csv, screen.json
    aanet/<setting>/            one fit per analyzed cluster, sweep.json
    validation/<setting>.json
    steering/<setting>.json
    report/                     CSV tables, per-figure data, summary.json
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from beliefgeom import __version__, io
from beliefgeom import aanet as aa
from beliefgeom import clustering as cl
from beliefgeom import validation as va
from beliefgeom.config import config_hash, dump_config, stage_rng, stage_seed
from beliefgeom.processes import belief_targets, composite_from_config, filter_tokens, sample_batch
from beliefgeom.sae import SaeConfig, SaeModel, train_sae
from beliefgeom.transformer import LmConfig, Transformer, capture_all, generate_steered, train_lm

log = logging.getLogger(__name__)

STAGES = ("gen-data", "train-lm", "capture", "train-sae", "cluster", "aanet", "validate", "steer", "report")
LM_MAGIC = b"BGLM"
DATA_MAGIC = b"BGDT"


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, stage: str | None = None):
        self.path = Path(path)
        hint = f" (run stage '{stage}' first)" if stage else ""
        super().__init__(f"missing upstream artifact: {self.path}{hint}")


class ConfigMismatch(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "nan" if not np.isfinite(x) else f"{float(x):.10g}"
    return str(x)


def _csv(rows: list[list], header: list[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


@dataclass
class Context:
    cfg: dict
    out: Path

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    def stamp(self, stage: str) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "stage": stage, "version": __version__}

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, stage)
        return path

    def write_json(self, path: Path, payload: dict, stage: str) -> None:
        body = dict(self.stamp(stage))
        body.update(payload)
        io.atomic_write_text(path, json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")

    def read_json(self, path: Path, stage: str) -> dict:
        body = json.loads(self.need(path, stage).read_text())
        if body.get("config_hash") != self.hash:
            raise ConfigMismatch(f"{path} was written with config {body.get('config_hash')}, current is {self.hash}")
        return body

    # -- derived layout
    def spec(self):
        return composite_from_config(self.cfg["process"]["components"])

    def sources(self) -> list[str]:
        if self.cfg["data"]["source"] == "external":
            return list(self.cfg["data"]["external_dumps"])
        return [f"L{layer}" for layer in self.cfg["data"]["layers"]]

    def settings(self) -> list[tuple[str, str, int]]:
        return [(f"{src}_k{k}", src, k) for src in self.sources() for k in self.cfg["sae"]["k_grid"]]

    def dump_path(self, src: str) -> Path:
        return self.path("activations", f"{src}.bgad")

    def toy(self) -> bool:
        return self.cfg["data"]["source"] == "toy"


# ---------------------------------------------------------------- row bookkeeping

def row_roles(ctx: Context, dump: io.ActivationDump) -> tuple[np.ndarray, np.ndarray]:
    """(SAE fit rows, analysis rows). Toy runs hold out the last analysis_sequences sequences."""
    n = dump.n_rows
    if not ctx.toy() or "seq_id" not in dump.meta:
        rows = np.arange(n)
        return rows, rows
    seq = dump.meta["seq_id"]
    cut = ctx.cfg["data"]["capture_sequences"] - ctx.cfg["data"]["analysis_sequences"]
    return np.flatnonzero(seq < cut), np.flatnonzero(seq >= cut)


def _load_dump(ctx: Context, src: str) -> io.ActivationDump:
    dump = io.read_dump(ctx.need(ctx.dump_path(src), "capture" if ctx.toy() else "import-dump"))
    if dump.n_rows == 0:
        raise ValueError(f"activation dump {src} has no rows")
    return dump


def _analysis_latents(ctx: Context, setting: str, src: str):
    dump = _load_dump(ctx, src)
    _, ana = row_roles(ctx, dump)
    sae, _ = SaeModel.load(ctx.need(ctx.path("sae", f"{setting}.bin"), "train-sae"))
    f = sae.encode(sae.normalize_input(dump.data[ana]))
    return dump, ana, sae, f


# ---------------------------------------------------------------- stages

def stage_gen_data(ctx: Context) -> dict:
    if not ctx.toy():
        return {"skipped": "external source"}
    spec = ctx.spec()
    rng = stage_rng(ctx.seed, "gen-data")
    T = ctx.cfg["lm"]["context_length"]
    ev, _ = sample_batch(spec, ctx.cfg["lm"]["eval_sequences"], T + 1, rng)
    cap, beliefs = sample_batch(spec, ctx.cfg["data"]["capture_sequences"], T, rng)
    tensors = {"eval_tokens": ev, "capture_tokens": cap}
    for comp, b in zip(spec.components, beliefs):
        tensors[f"belief/{comp.name}"] = b
    io.write_container(ctx.path("data", "process.bin"), DATA_MAGIC, tensors, ctx.stamp("gen-data"))
    return {"eval_sequences": len(ev), "capture_sequences": len(cap)}


def _load_data(ctx: Context):
    return io.read_container(ctx.need(ctx.path("data", "process.bin"), "gen-data"), DATA_MAGIC)[0]


def _lm_config(ctx: Context) -> LmConfig:
    return LmConfig(vocab=ctx.spec().vocab_size, **ctx.cfg["lm"])


def load_lm(ctx: Context) -> Transformer:
    t, _ = io.read_container(ctx.need(ctx.path("lm.bin"), "train-lm"), LM_MAGIC)
    model = Transformer(_lm_config(ctx), seed=0)
    model.load_state_dict(t)
    return model


def stage_train_lm(ctx: Context) -> dict:
    if not ctx.toy():
        return {"skipped": "external source"}
    data = _load_data(ctx)
    res = train_lm(
        ctx.spec(), _lm_config(ctx), seed=stage_seed(ctx.seed, "train-lm"),
        heldout=data["eval_tokens"], data_rng=stage_rng(ctx.seed, "train-lm/data"), log_every=500,
    )
    info = ctx.stamp("train-lm")
    info.update({"heldout_accuracy": res.heldout_accuracy, "untrained_accuracy": res.untrained_accuracy})
    io.write_container(ctx.path("lm.bin"), LM_MAGIC, res.model.state_dict(), info)
    return {"heldout_accuracy": res.heldout_accuracy, "untrained_accuracy": res.untrained_accuracy,
            "final_loss": float(np.mean(res.losses[-100:])), "train_seconds": res.seconds}


def stage_capture(ctx: Context) -> dict:
    if not ctx.toy():
        for src in ctx.sources():
            ctx.need(ctx.dump_path(src), "import-dump")
        return {"skipped": "external source"}
    data = _load_data(ctx)
    model = load_lm(ctx)
    spec = ctx.spec()
    toks = data["capture_tokens"]
    n_seq, T = toks.shape
    layers = ctx.cfg["data"]["layers"]
    res, logp = capture_all(model, toks, layers)
    seq_id = np.repeat(np.arange(n_seq, dtype=np.int64), T)
    pos = np.tile(np.arange(T, dtype=np.int64), n_seq)
    meta = {"seq_id": seq_id, "position": pos}
    for comp in spec.components:
        b = data[f"belief/{comp.name}"]
        meta[f"belief/{comp.name}"] = b.reshape(-1, b.shape[-1])
    for layer in layers:
        io.write_dump(ctx.dump_path(f"L{layer}"), io.ActivationDump(res[layer], meta, ctx.stamp("capture")))
    cut = ctx.cfg["data"]["capture_sequences"] - ctx.cfg["data"]["analysis_sequences"]
    ana = seq_id >= cut
    io.write_dump(
        ctx.path("activations", "logprobs.bgad"),
        io.ActivationDump(logp[ana], {"seq_id": seq_id[ana], "position": pos[ana]}, ctx.stamp("capture")),
    )
    return {"rows": int(n_seq * T), "analysis_rows": int(ana.sum())}


def stage_train_sae(ctx: Context) -> dict:
    c = ctx.cfg["sae"]
    out = {}
    for setting, src, k in ctx.settings():
        dump = _load_dump(ctx, src)
        fit_rows, _ = row_roles(ctx, dump)
        scfg = SaeConfig(d_sae=c["d_sae"], k=k, steps=c["steps"], batch=c["batch"], lr=c["lr"],
                         dead_window=c["dead_window"])
        res = train_sae(dump.data[fit_rows], scfg, seed=stage_seed(ctx.seed, f"train-sae/{setting}"))
        res.model.save(ctx.path("sae", f"{setting}.bin"), ctx.stamp("train-sae"))
        out[setting] = {"heldout_error": res.heldout_error, "dead_fraction": res.dead_fraction,
                        "resampled": res.resampled}
        log.info("sae %s: heldout rel. error %.4f, dead %.3f", setting, res.heldout_error, res.dead_fraction)
    return out


def _screen(ctx: Context) -> cl.RankScreen:
    c = ctx.cfg["clustering"]
    return cl.RankScreen(c["rank_min"], c["rank_max"], c["tau"])


def stage_cluster(ctx: Context) -> dict:
    c = ctx.cfg["clustering"]
    out = {}
    for setting, _, _ in ctx.settings():
        sae, _ = SaeModel.load(ctx.need(ctx.path("sae", f"{setting}.bin"), "train-sae"))
        W = sae.unit_directions()
        seed = stage_seed(ctx.seed, f"cluster/{setting}")
        cs = cl.k_subspace(W, c["K"], r_max=c["r_max"], max_iters=c["max_iters"], seed=seed, tau=c["tau"])
        screen = _screen(ctx)
        kept = cl.screen_clusters(cs, screen)
        nulls = cl.make_null_clusters(W, cs.sizes(), screen, seed=stage_seed(ctx.seed, f"null/{setting}"),
                                      n_partitions=c["null_partitions"])
        d = ctx.path("clusters", setting)
        cs.save(d / "clusters.csv", d / "bases.bin")
        rows = [[j, int(i)] for j, members in enumerate(nulls.clusters) for i in members]
        io.atomic_write_text(d / "nulls.csv", _csv(rows, ["null_id", "latent_id"]))
        payload = {
            "sizes": cs.sizes().tolist(), "ranks": cs.ranks.tolist(), "screened": kept,
            "iterations": cs.iterations, "converged": cs.converged,
            "null_attempted": nulls.attempted, "null_retained": nulls.retained, "null_ranks": nulls.ranks,
            "null_diagnostic": nulls.diagnostic,
            "real_retention": len(kept) / max(cs.K, 1),
            "null_retention": nulls.retained / max(nulls.attempted, 1),
        }
        ctx.write_json(d / "screen.json", payload, "cluster")
        out[setting] = {k: payload[k] for k in ("screened", "null_retained", "null_attempted")}
    return out


def _load_nulls(path: Path) -> list[np.ndarray]:
    groups: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            groups.setdefault(int(r["null_id"]), []).append(int(r["latent_id"]))
    return [np.array(groups[j], dtype=np.int64) for j in sorted(groups)]


def analyzed_clusters(ctx: Context, setting: str) -> list[tuple[str, str, np.ndarray]]:
    """(name, kind, member latents) for screened real clusters then retained nulls."""
    d = ctx.path("clusters", setting)
    cs = cl.ClusterSet.load(ctx.need(d / "clusters.csv", "cluster"), ctx.need(d / "bases.bin", "cluster"))
    screen = ctx.read_json(d / "screen.json", "cluster")
    out = [(f"c{c}", "real", cs.members(c)) for c in screen["screened"]]
    out += [(f"null{j}", "null", m) for j, m in enumerate(_load_nulls(ctx.need(d / "nulls.csv", "cluster")))]
    return out


def _aanet_cfg(ctx: Context) -> aa.AanetConfig:
    a = ctx.cfg["aanet"]
    return aa.AanetConfig(
        hidden=tuple(a["hidden"]), steps=a["steps"], lr=a["lr"], batch=a["batch"], restarts=a["restarts"],
        lambda_simplex=a["lambda_simplex"], lambda_nonneg=a["lambda_nonneg"], lambda_anchor=a["lambda_anchor"],
        lambda_cycle=a["lambda_cycle"],
    )


def _aanet_rows(ctx: Context, n: int, setting: str) -> np.ndarray:
    m = ctx.cfg["aanet"]["max_rows"]
    if n <= m:
        return np.arange(n)
    return np.sort(stage_rng(ctx.seed, f"aanet-rows/{setting}").choice(n, size=m, replace=False))


def stage_aanet(ctx: Context) -> dict:
    a = ctx.cfg["aanet"]
    out = {}
    for setting, src, _ in ctx.settings():
        _, _, sae, f = _analysis_latents(ctx, setting, src)
        rows = _aanet_rows(ctx, len(f), setting)
        curves = {}
        for name, kind, members in analyzed_clusters(ctx, setting):
            X = sae.cluster_contribution(f[rows], members)
            curve, fits = aa.sweep_k(X, a["Ks"], _aanet_cfg(ctx), seed=stage_seed(ctx.seed, f"aanet/{setting}/{name}"),
                                     theta=a["theta"])
            K_used = curve.k_star if curve.k_star is not None else a["fallback_K"]
            if K_used not in fits:
                K_used = min(fits, key=lambda k: abs(k - a["fallback_K"]))
            fits[K_used].save(ctx.path("aanet", setting, f"{name}.bin"), ctx.stamp("aanet"))
            curves[name] = {"kind": kind, "Ks": curve.Ks, "losses": curve.losses, "k_star": curve.k_star,
                            "K_used": K_used, "second_differences": {str(k): v for k, v in curve.second_differences.items()},
                            "failed": curve.failed}
            log.info("aanet %s %s: K*=%s", setting, name, curve.k_star)
        ctx.write_json(ctx.path("aanet", setting, "sweep.json"), {"clusters": curves}, "aanet")
        out[setting] = {n: c["k_star"] for n, c in curves.items()}
    return out


def _belief_targets(ctx: Context, dump: io.ActivationDump, rows: np.ndarray) -> dict[str, np.ndarray]:
    beliefs = dump.require_beliefs()
    spec = ctx.spec()
    return {c.name: belief_targets(c, beliefs[c.name][rows]) for c in spec.components}


def _recovery_split(ctx: Context, dump: io.ActivationDump, ana: np.ndarray):
    seq = dump.meta["seq_id"][ana] if "seq_id" in dump.meta else np.arange(len(ana))
    uniq = np.unique(seq)
    n_test = max(1, int(round(ctx.cfg["validation"]["heldout_fraction"] * len(uniq))))
    test_seqs = uniq[-n_test:]
    test = np.flatnonzero(np.isin(seq, test_seqs))
    train = np.flatnonzero(~np.isin(seq, test_seqs))
    return train, test


def stage_validate(ctx: Context) -> dict:
    v = ctx.cfg["validation"]
    logp = None
    lp_path = ctx.path("activations", "logprobs.bgad")
    if lp_path.exists():
        logp = io.read_dump(lp_path).data
    elif ctx.toy():
        raise MissingArtifact(lp_path, "capture")
    out = {}
    for setting, src, _ in ctx.settings():
        dump, ana, sae, f = _analysis_latents(ctx, setting, src)
        if logp is not None and len(logp) != len(ana):
            raise ValueError(f"logprobs have {len(logp)} rows but {setting} has {len(ana)} analysis rows")
        sweep = ctx.read_json(ctx.need(ctx.path("aanet", setting, "sweep.json"), "aanet"), "aanet")["clusters"]
        records = []
        for name, kind, members in analyzed_clusters(ctx, setting):
            fit = aa.SimplexFit.load(ctx.need(ctx.path("aanet", setting, f"{name}.bin"), "aanet"))
            X = sae.cluster_contribution(f, members)
            bary = fit.barycentric(X)
            split = va.split_samples(bary, v["v_thresh"], v["i_thresh"], v["cap"], seed=stage_seed(ctx.seed, f"split/{setting}/{name}"))
            rec = {"cluster": name, "kind": kind, "size": len(members), "members": members.tolist(),
                   "k_star": sweep[name]["k_star"], "K_used": fit.K, "near_vertex_counts": split.counts,
                   "empty_vertices": split.empty_vertices, "interior_count": int(len(split.interior))}
            nv_rows, nv_labels = split.near_rows()
            for tag, rows, strata in (("nv", nv_rows, nv_labels), ("si", split.interior, None)):
                rec[tag] = None
                if logp is None or len(rows) < 50:
                    continue
                try:
                    res = va.bary_advantage(rows, bary, f[:, members], logp, v["n_tokens"], v["folds"], v["ridge"],
                                            seed=stage_seed(ctx.seed, f"folds/{setting}/{name}/{tag}"), strata=strata)
                except ValueError as exc:
                    log.warning("%s %s %s: %s", setting, name, tag, exc)
                    continue
                rec[tag] = {"n": res.n_rows, "frac_wins": res.frac_wins, "p": res.p,
                            "mean_r2_bary": float(np.mean(res.r2_bary)),
                            "mean_r2_latent": float(np.mean(res.r2_best_latent)), "passes": bool(res.p < v["alpha"])}
            rec["kl_ratio"] = None
            if logp is not None:
                try:
                    kr = va.kl_ratio(split, np.exp(logp.astype(np.float64)), v["kl_pairs"],
                                     seed=stage_seed(ctx.seed, f"kl/{setting}/{name}"), eps=v["kl_eps"])
                    rec["kl_ratio"] = kr.ratio
                except ValueError as exc:
                    log.warning("%s %s kl_ratio: %s", setting, name, exc)
            rec["pie"] = vertex_pie(f[:, members], split)
            records.append(rec)
        payload = {"thresholds": {k: v[k] for k in ("v_thresh", "i_thresh", "cap", "alpha")}, "clusters": records}
        if ctx.toy():
            payload["recovery"] = recovery_payload(ctx, setting, dump, ana, f)
        ctx.write_json(ctx.path("validation", f"{setting}.json"), payload, "validate")
        out[setting] = {r["cluster"]: bool((r["nv"] or {}).get("passes") or (r["si"] or {}).get("passes")) for r in records}
    return out


def vertex_pie(latents: np.ndarray, split: va.SampleSplit) -> list[list[float]]:
    """Per latent, share of its activation mass falling on each vertex's near-vertex rows."""
    shares = []
    for j in range(latents.shape[1]):
        mass = np.array([float(np.abs(latents[r, j]).sum()) for r in split.near_vertex])
        tot = mass.sum()
        shares.append((mass / tot).tolist() if tot > 0 else [0.0] * len(mass))
    return shares


def recovery_payload(ctx: Context, setting: str, dump, ana, f) -> dict:
    d = ctx.path("clusters", setting)
    cs = cl.ClusterSet.load(d / "clusters.csv", d / "bases.bin")
    targets = _belief_targets(ctx, dump, ana)
    train, test = _recovery_split(ctx, dump, ana)
    signals = [f[:, cs.members(c)] for c in range(cs.K)]
    rec = va.recovery_r2(signals, targets, train, test, ctx.cfg["validation"]["noise_threshold"],
                         ctx.cfg["validation"]["ridge"])
    return {
        "components": rec.components, "r2": rec.r2, "assignment": rec.assignment, "best_r2": rec.best_r2,
        "conflicts": rec.conflicts, "all_recovered": rec.all_recovered(), "mean_assigned_r2": rec.mean_assigned_r2(),
        "noise_threshold": rec.noise_threshold,
    }


def stage_steer(ctx: Context) -> dict:
    if not ctx.toy():
        raise MissingArtifact(ctx.path("lm.bin"), "train-lm (steering needs the toy transformer and ground truth)")
    s = ctx.cfg["steering"]
    v = ctx.cfg["validation"]
    model = load_lm(ctx)
    spec = ctx.spec()
    data = _load_data(ctx)
    toks = data["capture_tokens"]
    T = toks.shape[1]
    out = {}
    for setting, src, _ in ctx.settings():
        layer = int(src[1:])
        dump, ana, sae, f = _analysis_latents(ctx, setting, src)
        val = ctx.read_json(ctx.path("validation", f"{setting}.json"), "validate")
        assign = val["recovery"]["assignment"]
        targets_all = _belief_targets(ctx, dump, ana)
        seq, pos = dump.meta["seq_id"][ana], dump.meta["position"][ana]
        records = []
        for rec in val["clusters"]:
            if rec["kind"] != "real":
                continue
            comp_idx = assign[int(rec["cluster"][1:])]
            if comp_idx is None:
                continue
            comp = spec.components[comp_idx]
            members = np.asarray(rec["members"], dtype=np.int64)
            fit = aa.SimplexFit.load(ctx.path("aanet", setting, f"{rec['cluster']}.bin"))
            bary = fit.barycentric(sae.cluster_contribution(f, members))
            split = va.split_samples(bary, v["v_thresh"], v["i_thresh"], v["cap"],
                                     seed=stage_seed(ctx.seed, f"split/{setting}/{rec['cluster']}"))
            tgt = targets_all[comp.name]
            centroids = np.array([tgt[r].mean(axis=0) if len(r) else np.full(tgt.shape[1], np.nan)
                                  for r in split.near_vertex])
            rng = stage_rng(ctx.seed, f"steer/{setting}/{rec['cluster']}")
            prompts = []
            for r in split.near_vertex:
                ok = r[pos[r] <= T - s["length"]]
                pick = np.sort(rng.choice(ok, size=min(len(ok), s["prompts_per_vertex"]), replace=False)) if len(ok) else ok
                prompts.append([toks[seq[i], : pos[i] + 1] for i in pick])

            def generate(prompt, direction, scale, mode, _layer=layer):
                return generate_steered(model, prompt, _layer, direction, scale, mode, s["length"], s["k_sustain"])

            def cont_belief(prompt, cont, _comp=comp, _ci=comp_idx):
                full = np.concatenate([prompt, cont])[None, :]
                b = filter_tokens(spec, full)[_ci][0, -1]
                return belief_targets(_comp, b)

            def delta(a, b, _fit=fit, _sae=sae):
                return (_fit.vertex_delta(a, b) * _sae.scale).astype(np.float32)

            try:
                res = va.steering_score(generate, cont_belief, prompts, centroids, delta, s["scales"], s["modes"])
            except ValueError as exc:
                log.warning("steer %s %s: %s", setting, rec["cluster"], exc)
                continue
            by_mode_scale = {}
            for (a_, b_, mode, scale), val_ in res.by_setting.items():
                by_mode_scale.setdefault(f"{mode}@{scale:g}", []).append(val_)
            records.append({"cluster": rec["cluster"], "component": comp.name, "score": res.score,
                            "control": res.control, "advantage": res.advantage,
                            "skipped_vertices": res.skipped_vertices,
                            "by_mode_scale": {k: float(np.mean(x)) for k, x in sorted(by_mode_scale.items())}})
        ctx.write_json(ctx.path("steering", f"{setting}.json"), {"clusters": records}, "steer")
        out[setting] = {r["cluster"]: r["advantage"] for r in records}
    return out


def stage_report(ctx: Context) -> dict:
    rep = ctx.path("report")
    table2, full, elbow, pie = [], [], [], []
    summary = {"settings": {}}
    best = None
    for setting, _, _ in ctx.settings():
        val = ctx.read_json(ctx.path("validation", f"{setting}.json"), "validate")
        sweep = ctx.read_json(ctx.path("aanet", setting, "sweep.json"), "aanet")["clusters"]
        steer_path = ctx.path("steering", f"{setting}.json")
        steer = {}
        if ctx.toy():
            steer = {r["cluster"]: r for r in ctx.read_json(steer_path, "steer")["clusters"]}
        recovery = val.get("recovery")
        for rec in val["clusters"]:
            nv, si = rec["nv"] or {}, rec["si"] or {}
            table2.append([setting, rec["cluster"], rec["kind"], rec["size"], nv.get("n"), nv.get("frac_wins"),
                           nv.get("p"), si.get("n"), si.get("frac_wins"), si.get("p")])
            comp, r2 = None, None
            if recovery and rec["kind"] == "real":
                ci = int(rec["cluster"][1:])
                j = recovery["assignment"][ci]
                comp = recovery["components"][j] if j is not None else "(noise)"
                r2 = recovery["best_r2"][ci]
            st = steer.get(rec["cluster"], {})
            full.append([setting, rec["cluster"], rec["kind"], rec["size"], rec["k_star"], rec["K_used"],
                         nv.get("frac_wins"), nv.get("p"), si.get("frac_wins"), si.get("p"), rec["kl_ratio"],
                         comp, r2, st.get("score"), st.get("control")])
            for j, shares in enumerate(rec["pie"]):
                for vtx, sh in enumerate(shares):
                    pie.append([setting, rec["cluster"], rec["members"][j], vtx, sh])
        for name, c in sweep.items():
            for K, loss in zip(c["Ks"], c["losses"]):
                elbow.append([setting, name, c["kind"], K, loss, c["k_star"]])
        entry = {"clusters": {r["cluster"]: {"kind": r["kind"],
                                             "passes": bool((r["nv"] or {}).get("passes") or (r["si"] or {}).get("passes"))}
                              for r in val["clusters"]}}
        if recovery:
            entry["all_recovered"] = recovery["all_recovered"]
            entry["mean_assigned_r2"] = recovery["mean_assigned_r2"]
            key = (recovery["all_recovered"], recovery["mean_assigned_r2"])
            if best is None or key > best[0]:
                best = (key, setting, recovery)
        summary["settings"][setting] = entry
    io.atomic_write_text(rep / "table2.csv", _csv(table2, ["setting", "cluster", "kind", "size", "nv_n", "nv_frac_wins",
                                                           "nv_p", "si_n", "si_frac_wins", "si_p"]))
    io.atomic_write_text(rep / "full_results.csv", _csv(full, [
        "setting", "cluster", "kind", "size", "k_star", "K_used", "nv_frac_wins", "nv_p", "si_frac_wins", "si_p",
        "kl_ratio", "assigned_component", "r2", "steering_score", "steering_control"]))
    io.atomic_write_text(rep / "elbow_curves.csv", _csv(elbow, ["setting", "cluster", "kind", "K", "loss", "k_star"]))
    io.atomic_write_text(rep / "vertex_pie.csv", _csv(pie, ["setting", "cluster", "latent", "vertex", "share"]))
    if best is not None:
        _, setting, recovery = best
        rows = []
        for ci, (j, r2) in enumerate(zip(recovery["assignment"], recovery["best_r2"])):
            rows.append([ci, recovery["components"][j] if j is not None else "(noise)", r2 if j is not None else None])
        rows.append(["mean", "assigned clusters", recovery["mean_assigned_r2"]])
        io.atomic_write_text(rep / "toy_r2.csv", _csv(rows, ["cluster", "assigned_component", "r2"]))
        summary["best_setting"] = setting
    summary.update(ctx.stamp("report"))
    summary["thresholds"] = ctx.cfg["validation"]
    if ctx.toy():
        _, info = io.read_container(ctx.need(ctx.path("lm.bin"), "train-lm"), LM_MAGIC)
        if info.get("config_hash") != ctx.hash:
            raise ConfigMismatch(f"lm.bin was written with config {info.get('config_hash')}")
        summary["lm"] = {"heldout_accuracy": info["heldout_accuracy"], "untrained_accuracy": info["untrained_accuracy"]}
    io.atomic_write_text(rep / "summary.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return {"best_setting": summary.get("best_setting")}


STAGE_FUNCS: dict[str, Callable[[Context], dict]] = {
    "gen-data": stage_gen_data,
    "train-lm": stage_train_lm,
    "capture": stage_capture,
    "train-sae": stage_train_sae,
    "cluster": stage_cluster,
    "aanet": stage_aanet,
    "validate": stage_validate,
    "steer": stage_steer,
    "report": stage_report,
}


# ---------------------------------------------------------------- runner

class RunLock:
    def __init__(self, out: Path):
        self.path = out / "run.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = self.path.read_text().strip()
            if pid.isdigit() and _pid_alive(int(pid)):
                raise LockError(f"{self.path} is held by running process {pid}") from None
            self.path.unlink()
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _pid_alive(pid: int) -> bool:
    if pid == os.getpid():
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def run(stage: str, cfg: dict, out: str | Path, resume: bool = False) -> dict:
    """Run one stage (or ``all``) and return per-stage summaries."""
    out = Path(out)
    stages = STAGES if stage == "all" else (stage,)
    for s in stages:
        if s not in STAGE_FUNCS:
            raise ValueError(f"unknown stage {s!r}")
    ctx = Context(cfg, out)
    results = {}
    with RunLock(out):
        cfg_path = out / "config.yaml"
        if resume and cfg_path.exists():
            import yaml

            prev = yaml.safe_load(cfg_path.read_text())
            if config_hash(prev) != ctx.hash:
                raise ConfigMismatch(f"{cfg_path} has hash {config_hash(prev)}, current config is {ctx.hash}")
        io.atomic_write_text(cfg_path, dump_config(cfg))
        for s in stages:
            marker = out / "stages" / f"{s}.json"
            if resume and marker.exists():
                done = json.loads(marker.read_text())
                if done.get("config_hash") != ctx.hash:
                    raise ConfigMismatch(f"stage {s} was completed under config {done.get('config_hash')}")
                log.info("stage %s already complete, skipping", s)
                results[s] = done.get("result", {})
                continue
            log.info("stage %s starting", s)
            t0 = time.perf_counter()
            res = STAGE_FUNCS[s](ctx)
            ctx.write_json(marker, {"result": res, "seconds": time.perf_counter() - t0}, s)
            results[s] = res
    return results


def import_dump(path: str | Path, out: str | Path, name: str) -> io.ActivationDump:
    """Validate an external dump and place it under ``activations/<name>.bgad``."""
    dump = io.read_dump(path)
    io.write_dump(Path(out) / "activations" / f"{name}.bgad", dump)
    return dump
