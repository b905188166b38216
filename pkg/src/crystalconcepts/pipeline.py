"""End-to-end pipeline with on-disk checkpoints between stages.

Every stage reads its inputs from the output directory and writes its
outputs there, so an interrupted run resumed from ``state.json`` follows
exactly the same path as an uninterrupted one.  Each stage draws its seed
from the run seed and the stage name.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os

import numpy as np

from . import io
from .codebook import ConceptVQVAE, train_three_stage
from .composition import (
    CompositionGenerator,
    LatentMatrix,
    composition_from_codes,
    extract_latent_matrices,
    filter_vsun,
    read_pool,
    refine_generator,
    sample_compositions,
    train_composition_generator,
    write_pool,
)
from .config import STAGES
from .crystal import Crystal
from .errors import ConfigError, CrystalConceptsError, RefinementSkipped, StageFailed
from .evaluation import ToyStabilityOracle, compute_metrics
from .generator import BaseModel, generate, train_base_model
from .interpretation import (
    environment_dump,
    family_profiles,
    random_pairing_baseline,
    top_k_environments,
    train_symmetry_classifier,
    verify_composition_adherence,
)
from .synthetic import make_synthetic_dataset
from .training import derive_seed

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1

# file name -> description, for MANIFEST.json
FILES = {
    "train.jsonl": "training crystals, canonical JSON-lines records",
    "ingest_errors.json": "files or records rejected during ingestion",
    "vqvae.pt": "concept VQ-VAE checkpoint (config, codebook, weights, provenance, seed)",
    "vqvae_log.json": "per-epoch losses and stage timings of codebook training",
    "latents.jsonl": "pre-quantization latent matrix per training crystal",
    "comp_gen.pt": "composition generator checkpoint",
    "pool_initial.jsonl": "compositions sampled from the composition generator, with filter verdicts",
    "filter_initial.json": "V.S.U.N filter counts for the initial pool",
    "comp_gen_refined.pt": "composition generator after the last refinement round",
    "refine.json": "refinement rounds and their filter counts",
    "compositions_final.jsonl": "qualified compositions used to condition generation",
    "base_cond.pt": "composition-conditioned base model checkpoint",
    "base_uncond.pt": "unconditional base model checkpoint",
    "generated.jsonl": "crystals generated under the final compositions",
    "generated_uncond.jsonl": "crystals generated by the unconditional base model",
    "generation.json": "conditioning composition per generated sample and sampling seeds",
    "metrics.json": "metrics of the conditioned samples",
    "metrics.csv": "per-crystal flags of the conditioned samples",
    "metrics_uncond.json": "metrics of the unconditional samples",
    "adherence.json": "composition adherence of conditioned samples and random-pairing baselines",
    "top_k_environments.json": "nearest local environments per concept",
    "family_profiles.json": "per-family concept frequency vectors",
    "family_similarity.csv": "cosine similarity between family profiles",
    "family_similarity.svg": "heatmap of the family similarity matrix",
    "classifier_metrics.json": "symmetry classifier accuracies",
    "report.json": "per-stage summaries of the run",
}


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _load(path):
    with open(path) as fh:
        return json.load(fh)


def _write_crystals(crystals, path):
    with open(path, "w") as fh:
        for c in crystals:
            fh.write(json.dumps(c.to_record() if c is not None else {"decode_failed": True}) + "\n")


def _plain(obj):
    """JSON round trip, so tuples compare equal to their reloaded lists."""
    return json.loads(json.dumps(obj))


def _read_crystals(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append(None if rec.get("decode_failed") else Crystal.from_record(rec))
    return out


class Pipeline:
    def __init__(self, config):
        self.cfg = config
        self.out = config.resolved_output_dir()
        self.state_path = self.out / "state.json"

    # -- helpers ----------------------------------------------------------
    def path(self, name):
        return self.out / name

    def need(self, *names):
        missing = [n for n in names if not self.path(n).exists()]
        if missing:
            raise ConfigError(f"missing inputs {missing}; enable the stage that produces them")

    def seed(self, stage):
        return derive_seed(self.cfg.seed, stage)

    def dataset(self):
        self.need("train.jsonl")
        return io.read_jsonl(self.path("train.jsonl"))

    def vqvae(self):
        self.need("vqvae.pt")
        return ConceptVQVAE.load(self.path("vqvae.pt"))

    def oracle(self, reference):
        o = self.cfg.oracle
        return ToyStabilityOracle(reference, o.contact, o.strength, o.steps, o.step_size)

    def load_state(self):
        if not self.state_path.exists():
            return {"completed": [], "report": {}}
        state = _load(self.state_path)
        if state.get("config") != _plain(self.cfg.to_dict()):
            raise ConfigError(f"{self.state_path} was written with a different configuration")
        return state

    def save_state(self, state):
        # write then rename, so a kill never leaves a truncated state file
        state["config"] = self.cfg.to_dict()
        tmp = self.state_path.with_suffix(".json.tmp")
        _dump(state, tmp)
        os.replace(tmp, self.state_path)

    # -- stages -------------------------------------------------------------
    def stage_data(self):
        d = self.cfg.data
        if d.source == "synthetic":
            crystals = make_synthetic_dataset(d.synthetic, self.seed("data"))
            errors = []
        else:
            result = io.ingest(d.path, d.source, strict=d.strict, max_atoms=self.cfg.codebook.max_atoms)
            crystals, errors = result.crystals, result.errors
        io.write_jsonl(crystals, self.path("train.jsonl"))
        _dump({"errors": errors}, self.path("ingest_errors.json"))
        return {"crystals": len(crystals), "rejected": len(errors)}

    def stage_train_vqvae(self):
        model, record = train_three_stage(self.dataset(), self.cfg.codebook, self.seed("train_vqvae"))
        model.save(self.path("vqvae.pt"), seed=self.seed("train_vqvae"))
        _dump({"history": record.history, "config": self.cfg.to_dict()}, self.path("vqvae_log.json"))
        return {"final_loss": record.history[-1]["loss"] if record.history else None}

    def stage_extract(self):
        latents = extract_latent_matrices(self.dataset(), self.vqvae())
        with open(self.path("latents.jsonl"), "w") as fh:
            for lm in latents:
                fh.write(json.dumps({"Z": lm.Z.tolist()}) + "\n")
        return {"matrices": len(latents)}

    def latents(self):
        self.need("latents.jsonl")
        with open(self.path("latents.jsonl")) as fh:
            return [LatentMatrix(np.asarray(json.loads(line)["Z"])) for line in fh if line.strip()]

    def stage_train_gen(self):
        G = train_composition_generator(self.latents(), self.cfg.composition, self.seed("train_gen"))
        G.save(self.path("comp_gen.pt"), seed=self.seed("train_gen"))
        return {"final_loss": G.history[-1]["loss"]}

    def stage_sample(self):
        self.need("comp_gen.pt")
        G = CompositionGenerator.load(self.path("comp_gen.pt"))
        comps = sample_compositions(G, self.cfg.sampling.n_compositions, self.vqvae().codes, seed=self.seed("sample"))
        write_pool(self.path("pool_initial.jsonl"), comps)
        return {"compositions": len(comps)}

    def _filter(self, comps, vqvae, data):
        qualified, report, _ = filter_vsun(comps, vqvae, data, self.oracle(data), self.cfg.matcher)
        return qualified, report

    def stage_filter(self):
        self.need("pool_initial.jsonl")
        vqvae, data = self.vqvae(), self.dataset()
        comps, _ = read_pool(self.path("pool_initial.jsonl"), vqvae.codes)
        qualified, report = self._filter(comps, vqvae, data)
        write_pool(self.path("pool_initial.jsonl"), comps, report)
        write_pool(self.path("compositions_final.jsonl"), qualified)
        summary = {**report.to_dict(), "qualified_fraction": report.qualified_fraction}
        _dump(summary, self.path("filter_initial.json"))
        return summary

    def stage_refine(self):
        self.need("comp_gen.pt", "pool_initial.jsonl")
        vqvae, data = self.vqvae(), self.dataset()
        G = CompositionGenerator.load(self.path("comp_gen.pt"))
        comps, verdicts = read_pool(self.path("pool_initial.jsonl"), vqvae.codes)
        qualified = [c for c, v in zip(comps, verdicts) if v and v.get("qualified")]
        rounds = []
        for r in range(self.cfg.composition.refine_rounds):
            try:
                G = refine_generator(G, qualified, derive_seed(self.cfg.seed, "refine", r))
            except RefinementSkipped as exc:
                log.warning("refinement round %d skipped: %s", r, exc)
                rounds.append({"round": r, "skipped": True})
                break
            fresh = sample_compositions(G, self.cfg.sampling.n_compositions, vqvae.codes,
                                        seed=derive_seed(self.cfg.seed, "refine-sample", r))
            qualified_r, report = self._filter(fresh, vqvae, data)
            write_pool(self.path(f"pool_round{r + 1}.jsonl"), fresh, report)
            rounds.append({"round": r, "skipped": False, **report.to_dict(),
                           "qualified_fraction": report.qualified_fraction})
            if qualified_r:
                qualified = qualified_r
        G.save(self.path("comp_gen_refined.pt"), seed=self.cfg.seed)
        write_pool(self.path("compositions_final.jsonl"), qualified)
        _dump({"rounds": rounds, "final_compositions": len(qualified)}, self.path("refine.json"))
        return {"rounds": rounds, "final_compositions": len(qualified)}

    def training_compositions(self, data, vqvae):
        comps = []
        for lm in extract_latent_matrices(data, vqvae):
            idx, _ = vqvae.assign(lm.Z)
            comps.append(composition_from_codes(idx, vqvae.codes))
        return comps

    def stage_train_base(self):
        data, vqvae = self.dataset(), self.vqvae()
        seed = self.seed("train_base")
        model = train_base_model(data, self.training_compositions(data, vqvae), self.cfg.base, seed)
        model.save(self.path("base_cond.pt"), seed=seed)
        summary = {"conditional_final_loss": model.history[-1]["loss"]}
        if self.cfg.sampling.unconditional_baseline:
            model_u = train_base_model(data, None, self.cfg.base, seed)
            model_u.save(self.path("base_uncond.pt"), seed=seed)
            summary["unconditional_final_loss"] = model_u.history[-1]["loss"]
        return summary

    def final_compositions(self, vqvae):
        if not self.path("compositions_final.jsonl").exists():
            return []
        return read_pool(self.path("compositions_final.jsonl"), vqvae.codes)[0]

    def stage_generate(self):
        self.need("base_cond.pt")
        vqvae = self.vqvae()
        comps = self.final_compositions(vqvae)
        n = self.cfg.sampling.n_generate
        seed = self.seed("generate")
        model = BaseModel.load(self.path("base_cond.pt"))
        crystals = generate(model, n, comps or None, seed=seed)
        _write_crystals(crystals, self.path("generated.jsonl"))
        manifest = {"seed": seed, "omega": model.config.omega,
                    "conditioning": [int(i % len(comps)) for i in range(n)] if comps else None}
        summary = {"generated": n, "decode_failed": sum(c is None for c in crystals), "conditioned": bool(comps)}
        if self.cfg.sampling.unconditional_baseline:
            self.need("base_uncond.pt")
            uncond = generate(BaseModel.load(self.path("base_uncond.pt")), n, None, seed=seed)
            _write_crystals(uncond, self.path("generated_uncond.jsonl"))
            summary["unconditional_decode_failed"] = sum(c is None for c in uncond)
        _dump(manifest, self.path("generation.json"))
        return summary

    def stage_evaluate(self):
        self.need("generated.jsonl")
        data, vqvae = self.dataset(), self.vqvae()
        oracle = self.oracle(data)
        generated = _read_crystals(self.path("generated.jsonl"))
        report = compute_metrics(generated, data, oracle, self.cfg.matcher)
        _dump({**report.to_dict(), "config": self.cfg.to_dict()}, self.path("metrics.json"))
        report.to_csv(self.path("metrics.csv"))
        summary = {"conditioned": report.aggregates}
        if self.path("generated_uncond.jsonl").exists() and self.cfg.sampling.unconditional_baseline:
            uncond = compute_metrics(_read_crystals(self.path("generated_uncond.jsonl")), data, oracle, self.cfg.matcher)
            _dump({**uncond.to_dict(), "config": self.cfg.to_dict()}, self.path("metrics_uncond.json"))
            summary["unconditional"] = uncond.aggregates
        summary["adherence"] = self.adherence(generated, data, vqvae)
        _dump(summary["adherence"], self.path("adherence.json"))
        return summary

    def adherence(self, generated, data, vqvae):
        """Adherence under the final compositions and under training compositions."""
        out = {}
        comps = self.final_compositions(vqvae)
        train_comps = self.training_compositions(data, vqvae)
        if comps:
            chosen = [comps[i % len(comps)] for i in range(len(generated))]
            scores = [verify_composition_adherence(c, k, vqvae) for c, k in zip(generated, chosen) if c is not None]
            out["generated_compositions"] = {
                "mean": float(np.mean(scores)) if scores else 0.0,
                "random_baseline": random_pairing_baseline(generated, comps, vqvae, seed=self.seed("baseline")),
            }
        if self.path("base_cond.pt").exists():
            n = min(self.cfg.sampling.n_generate, len(train_comps))
            rng = np.random.default_rng(self.seed("adherence"))
            pick = rng.choice(len(train_comps), size=n, replace=False)
            chosen = [train_comps[i] for i in pick]
            model = BaseModel.load(self.path("base_cond.pt"))
            samples = generate(model, n, chosen, seed=self.seed("adherence"))
            scores = [verify_composition_adherence(c, k, vqvae) for c, k in zip(samples, chosen) if c is not None]
            out["training_compositions"] = {
                "mean": float(np.mean(scores)) if scores else 0.0,
                "random_baseline": random_pairing_baseline(samples, train_comps, vqvae, seed=self.seed("baseline")),
                "samples": n,
            }
        return out

    def stage_interpret(self):
        data, vqvae = self.dataset(), self.vqvae()
        icfg = self.cfg.interpret
        envs = vqvae.prepare(data, keep_environments=True)
        idx, _ = vqvae.assign(vqvae.encode_environments(envs))
        codes = list(icfg.codes) or sorted(set(idx.tolist()))
        dumps = [environment_dump(top_k_environments(t, data, vqvae, icfg.top_k, envs=envs), t) for t in codes]
        _dump(dumps, self.path("top_k_environments.json"))
        summary = {"codes_dumped": len(codes), "codes_used": len(set(idx.tolist()))}
        if all(c.space_group is not None for c in data):
            sim = family_profiles(data, vqvae)
            _dump({"profiles": [{"family": p.family, "count": p.count, "p": p.p.tolist()} for p in sim.profiles],
                   "families": sim.families, "similarity": sim.matrix.tolist()}, self.path("family_profiles.json"))
            sim.to_csv(self.path("family_similarity.csv"))
            sim.to_svg(self.path("family_similarity.svg"))
            if icfg.train_classifier:
                _, metrics = train_symmetry_classifier(data, vqvae, self.seed("interpret"), icfg.classifier)
                metrics["reference_accuracies"] = {"space_group": 0.6711, "family": 0.7737,
                                                   "note": "full-scale reference values; not reproducible at desk scale"}
                _dump(metrics, self.path("classifier_metrics.json"))
                summary["family_accuracy"] = metrics["family_accuracy"]
                summary["space_group_accuracy"] = metrics["space_group_accuracy"]
        return summary

    # -- orchestration ------------------------------------------------------
    def write_manifest(self):
        entries = []
        for name, desc in FILES.items():
            p = self.path(name)
            if p.exists():
                entries.append({"file": name, "description": desc, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        for p in sorted(self.out.glob("pool_round*.jsonl")):
            entries.append({"file": p.name, "description": "compositions sampled after a refinement round, with verdicts",
                            "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        _dump({"schema_version": MANIFEST_SCHEMA, "config": self.cfg.to_dict(), "files": entries},
              self.path("MANIFEST.json"))

    def _execute(self, stage, state):
        log.info("stage %s", stage)
        try:
            state["report"][stage] = getattr(self, f"stage_{stage}")()
        except (CrystalConceptsError, ValueError, OSError) as exc:
            state["failed"] = {"stage": stage, "error": f"{type(exc).__name__}: {exc}"}
            self.save_state(state)
            raise StageFailed(stage, exc) from exc
        if stage not in state["completed"]:
            state["completed"].append(stage)
        state.pop("failed", None)
        self.save_state(state)

    def _finish(self, state):
        _dump(state["report"], self.path("report.json"))
        self.write_manifest()
        return state["report"]

    def run_stage(self, stage):
        """Run one stage on whatever the output directory already holds."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        self.out.mkdir(parents=True, exist_ok=True)
        state = self.load_state()
        state.setdefault("report", {})
        self._execute(stage, state)
        return self._finish(state)

    def run(self, stop_after=None, resume=True):
        if stop_after is not None and stop_after not in STAGES:
            raise ConfigError(f"unknown stage {stop_after!r}")
        if not any(self.cfg.stages.values()):
            return {}
        self.out.mkdir(parents=True, exist_ok=True)
        state = self.load_state() if resume else {"completed": [], "report": {}}
        state.setdefault("report", {})
        for stage in STAGES:
            if self.cfg.stages[stage] and stage not in state["completed"]:
                self._execute(stage, state)
            if stop_after == stage:
                break
        return self._finish(state)


def run_pipeline(config, stop_after=None, resume=True):
    return Pipeline(config).run(stop_after=stop_after, resume=resume)
