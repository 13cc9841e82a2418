"""Staged pipeline: world -> graph embedding -> index -> pairs -> pre-training -> evaluation.

Every stage reads its inputs from the output directory, writes its artifacts
there and records a manifest under ``manifests/<stage>.json``.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
import zlib
from pathlib import Path

import numpy as np

from . import _accel
from .downstream import (EngagementTrainConfig, FinetuneConfig, MetricReport, embed_tweets,
                         finetune_classifier, hits_at_k, macro_f1, per_class_subsample,
                         save_sweep_csv, supervision_sweep, train_engagement_model,
                         train_feature_classifier)
from .encoder import EncoderConfig, Tokenizer, load_checkpoint, save_checkpoint
from .graph import (WorldConfig, generate_synthetic_world, load_corpus, load_engagement_log,
                    load_labels, load_records, save_corpus, save_engagement_log, save_labels,
                    save_records, split_engagements)
from .index import IndexConfig, build_index, load_index, load_pairs, mine_pairs, save_index, save_pairs
from .pretrain import PretrainConfig, pretrain_stage1, pretrain_stage2, save_curve
from .twhin import TwhinConfig, load_embeddings, save_embeddings, train_twhin

log = logging.getLogger("soclm")

STAGES = ("gen", "embed-graph", "build-index", "mine-pairs", "pretrain1", "pretrain2",
          "eval-engagement", "eval-hashtag", "sweep")

DEFAULT_CONFIG = {
    "seed": 0,
    "deterministic": False,
    "threads": 1,
    "world": {"n_topics": 4, "n_users": 600, "n_tweets": 2000, "n_records": 6000,
              "vocab_size": 400, "style_groups": 8, "style_token_rate": 0.8},
    "twhin": {"dim": 32, "epochs": 10},
    "index": {"n_list": 32, "m": 8, "k_codes": 64},
    "mine": {"k": 5, "nprobe": 8, "max_distance": None},
    "tokenizer": {"max_size": 512, "max_len": 32},
    "encoder": {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 128},
    "pretrain1": {"steps": 400, "batch_size": 32},
    "pretrain2": {"steps": 400, "batch_pairs": 16, "baseline": True},
    "eval": {
        "split": [0.8, 0.1, 0.1],
        "pooling": "combined",
        "n_runs": 3,
        "n_candidates": 100,
        "k": 10,
        "engagement": {"epochs": 5},
        "hashtag": {"l2": 1e-4, "finetune": True, "finetune_per_class": 32,
                    "finetune_cfg": {"epochs": 2, "lr": 1e-4, "batch": 32}},
        "sweep": {"budgets": [2, 8, 32], "n_runs": 5},
    },
}

# block name -> dataclass used for validation
_BLOCKS = {
    "world": WorldConfig,
    "twhin": TwhinConfig,
    "index": IndexConfig,
    "encoder": EncoderConfig,
    "pretrain1": PretrainConfig,
}


class ConfigError(ValueError):
    """Invalid configuration; message starts with the offending key path."""


class MissingArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _merge(base: dict, over: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"{item}: override must look like path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, path: list[str], value) -> None:
    node = cfg
    for i, part in enumerate(path[:-1]):
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[path[-1]] = value


def _check_dataclass(cls, block: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in block:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    try:
        return cls.from_dict(block) if hasattr(cls, "from_dict") else cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def validate_config(cfg: dict) -> dict:
    """Check every block; raise ConfigError naming the offending path."""
    known = set(DEFAULT_CONFIG)
    for key in cfg:
        if key not in known:
            raise ConfigError(f"{key}: unknown top-level key")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed: must be an integer")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads: must be a positive integer")
    for name, cls in _BLOCKS.items():
        block = dict(cfg[name])
        if name == "encoder":
            block.setdefault("vocab_size", 512)
        obj = _check_dataclass(cls, block, name)
        if name == "world":
            try:
                obj.validate()
            except ValueError as exc:
                raise ConfigError(f"world: {exc}") from None
    p2 = {k: v for k, v in cfg["pretrain2"].items() if k != "baseline"}
    _check_dataclass(PretrainConfig, p2, "pretrain2")
    mine = cfg["mine"]
    for key in mine:
        if key not in ("k", "nprobe", "max_distance"):
            raise ConfigError(f"mine.{key}: unknown key")
    if int(mine["k"]) < 1:
        raise ConfigError("mine.k: must be >= 1")
    if int(mine["nprobe"]) < 1 or int(mine["nprobe"]) > int(cfg["index"]["n_list"]):
        raise ConfigError("mine.nprobe: must lie in [1, index.n_list]")
    ev = cfg["eval"]
    if len(ev["split"]) != 3 or abs(sum(ev["split"]) - 1.0) > 1e-9 or min(ev["split"]) <= 0:
        raise ConfigError("eval.split: three positive ratios summing to 1")
    if ev["pooling"] not in ("cls", "mean", "combined"):
        raise ConfigError("eval.pooling: must be cls, mean or combined")
    if int(ev["n_runs"]) < 1:
        raise ConfigError("eval.n_runs: must be >= 1")
    _check_dataclass(EngagementTrainConfig, ev["engagement"], "eval.engagement")
    _check_dataclass(FinetuneConfig, ev["hashtag"].get("finetune_cfg", {}), "eval.hashtag.finetune_cfg")
    if any(int(b) < 1 for b in ev["sweep"]["budgets"]):
        raise ConfigError("eval.sweep.budgets: budgets must be >= 1")
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        cfg = _merge(cfg, user)
    for item in overrides:
        keys, value = parse_override(item)
        apply_override(cfg, keys, value)
    return validate_config(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def stage_seed(root: int, stage: str) -> int:
    """Independent, named substream of the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1)[0])


def blob_sha1(path) -> str:
    """Content hash in git's blob form."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


class Pipeline:
    # artifact file -> producing stage
    PRODUCER = {
        "engagements.tsv": "gen", "corpus.jsonl": "gen", "labels.tsv": "gen",
        "records.bin": "gen", "splits.json": "gen",
        "twhin.emb": "embed-graph", "index.bin": "build-index", "pairs.tsv": "mine-pairs",
        "vocab.txt": "pretrain1", "stage1.ckpt": "pretrain1",
        "stage2.ckpt": "pretrain2", "mlm_only.ckpt": "pretrain2",
    }

    def __init__(self, cfg: dict, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = 1 if cfg["deterministic"] else cfg["threads"]
        _accel.set_threads(self.threads)

    def path(self, name) -> Path:
        return self.out / name

    def need(self, *names) -> list[Path]:
        paths = []
        for name in names:
            p = self.path(name)
            if not p.exists():
                raise MissingArtifactError(
                    f"missing {name}; run the '{self.PRODUCER[name]}' stage first")
            paths.append(p)
        return paths

    def seed(self, stage) -> int:
        return stage_seed(self.cfg["seed"], stage)

    def manifest(self, stage, block, inputs, outputs) -> None:
        mdir = self.path("manifests")
        mdir.mkdir(exist_ok=True)
        doc = {
            "stage": stage,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed(stage),
            "root_seed": self.cfg["seed"],
            "config": block,
            "inputs": {Path(p).name: blob_sha1(p) for p in inputs},
            "outputs": {Path(p).name: blob_sha1(p) for p in outputs},
        }
        (mdir / f"{stage}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def run(self, stage: str) -> None:
        if stage == "all":
            for s in STAGES:
                self.run(s)
            return
        log.info("stage %s", stage)
        getattr(self, "stage_" + stage.replace("-", "_"))()

    # -- data ---------------------------------------------------------------

    def stage_gen(self):
        block = self.cfg["world"]
        world = generate_synthetic_world(WorldConfig.from_dict(block), self.seed("gen"))
        outs = [self.path(n) for n in ("engagements.tsv", "corpus.jsonl", "labels.tsv",
                                        "records.bin", "records.bin.ids", "splits.json")]
        save_engagement_log(world.graph, outs[0])
        save_corpus(world.corpus, outs[1])
        save_labels(world.labels, outs[2])
        save_records(world.records, outs[3], outs[4])
        tr, dv, te = split_engagements(list(world.corpus.ids), self.cfg["eval"]["split"],
                                       self.seed("split"))
        outs[5].write_text(json.dumps({"train": tr, "dev": dv, "test": te}) + "\n")
        self.manifest("gen", block, [], outs)

    def stage_embed_graph(self):
        (src,) = self.need("engagements.tsv")
        graph = load_engagement_log(src)
        cfg = TwhinConfig.from_dict(self.cfg["twhin"])
        cfg.seed = self.seed("embed-graph")
        cfg.threads = self.threads
        table = train_twhin(graph, cfg)
        out = self.path("twhin.emb")
        save_embeddings(table, out)
        self.manifest("embed-graph", self.cfg["twhin"], [src], [out])

    def stage_build_index(self):
        (src,) = self.need("twhin.emb")
        table = load_embeddings(src)
        cfg = IndexConfig(**self.cfg["index"])
        cfg.seed = self.seed("build-index")
        out = self.path("index.bin")
        save_index(build_index(table.tweet_vecs, cfg), out)
        self.manifest("build-index", self.cfg["index"], [src], [out])

    def stage_mine_pairs(self):
        emb, idx = self.need("twhin.emb", "index.bin")
        table = load_embeddings(emb)
        m = self.cfg["mine"]
        pairs = mine_pairs(load_index(idx), table.tweet_vecs, int(m["k"]), int(m["nprobe"]),
                           m.get("max_distance"))
        out = self.path("pairs.tsv")
        save_pairs(pairs, table.tweet_ids, out)
        self.manifest("mine-pairs", m, [emb, idx], [out])

    # -- pre-training -------------------------------------------------------

    def _encoder_cfg(self, tok: Tokenizer) -> EncoderConfig:
        block = dict(self.cfg["encoder"], vocab_size=len(tok), max_len=tok.max_len)
        return EncoderConfig.from_dict(block)

    def stage_pretrain1(self):
        (src,) = self.need("corpus.jsonl")
        corpus = load_corpus(src)
        tcfg = self.cfg["tokenizer"]
        tok = Tokenizer.build(corpus.texts, tcfg["max_size"], tcfg["max_len"])
        ecfg = self._encoder_cfg(tok)
        pcfg = PretrainConfig.from_dict(self.cfg["pretrain1"])
        pcfg.seed = self.seed("pretrain1")
        res = pretrain_stage1(corpus.texts, tok, ecfg, pcfg)
        outs = [self.path("vocab.txt"), self.path("stage1.ckpt"), self.path("stage1_loss.csv")]
        tok.save(outs[0])
        save_checkpoint(res.params, ecfg, outs[1], {"stage": 1})
        save_curve(res.curve, outs[2])
        self.manifest("pretrain1", self.cfg["pretrain1"], [src], outs)

    def stage_pretrain2(self):
        corpus_p, vocab_p, ckpt_p = self.need("corpus.jsonl", "vocab.txt", "stage1.ckpt")
        (pairs_p,) = self.need("pairs.tsv")
        corpus = load_corpus(corpus_p)
        tok = Tokenizer.load(vocab_p, self.cfg["tokenizer"]["max_len"])
        params, ecfg, _ = load_checkpoint(ckpt_p)
        pairs = load_pairs(pairs_p, corpus.ids)
        block = dict(self.cfg["pretrain2"])
        baseline = block.pop("baseline", True)
        pcfg = PretrainConfig.from_dict(block)
        pcfg.seed = self.seed("pretrain2")
        res = pretrain_stage2(params, corpus.texts, pairs, tok, ecfg, pcfg)
        outs = [self.path("stage2.ckpt"), self.path("stage2_loss.csv")]
        save_checkpoint(res.params, ecfg, outs[0], {"stage": 2})
        save_curve(res.curve, outs[1])
        if baseline:
            # same budget, MLM only, from the same stage-1 weights
            base_cfg = dataclasses.replace(pcfg, batch_size=2 * min(pcfg.batch_pairs, len(pairs)))
            mres = pretrain_stage1(corpus.texts, tok, ecfg, base_cfg, params=params)
            outs += [self.path("mlm_only.ckpt"), self.path("mlm_only_loss.csv")]
            save_checkpoint(mres.params, ecfg, outs[2], {"stage": 1, "continued": True})
            save_curve(mres.curve, outs[3])
        self.manifest("pretrain2", self.cfg["pretrain2"], [corpus_p, vocab_p, ckpt_p, pairs_p], outs)

    # -- evaluation ---------------------------------------------------------

    def _models(self):
        names = [("joint", "stage2.ckpt")]
        if self.path("mlm_only.ckpt").exists():
            names.append(("mlm_only", "mlm_only.ckpt"))
        return [(n, self.need(f)[0]) for n, f in names]

    def _features(self, ckpt_path, pooling):
        corpus_p, vocab_p = self.need("corpus.jsonl", "vocab.txt")
        corpus = load_corpus(corpus_p)
        tok = Tokenizer.load(vocab_p, self.cfg["tokenizer"]["max_len"])
        params, ecfg, _ = load_checkpoint(ckpt_path)
        return corpus, tok, params, ecfg, embed_tweets(params, ecfg, tok, corpus.texts, pooling)

    def _splits(self):
        (p,) = self.need("splits.json")
        return json.loads(p.read_text())

    def _write_metrics(self, name, reports, stage, inputs, extra=()):
        out = self.path(name)
        out.write_text(json.dumps([json.loads(r.to_json()) for r in reports], sort_keys=True,
                                  indent=2) + "\n")
        self.manifest(stage, self.cfg["eval"], inputs, [*extra, out])

    def stage_eval_engagement(self):
        ev = self.cfg["eval"]
        rec_p, ids_p, split_p = self.need("records.bin", "records.bin.ids", "splits.json")
        records = load_records(rec_p, ids_p)
        splits = self._splits()
        subsets = {}
        for part in ("train", "dev", "test"):
            keep = set(splits[part])
            subsets[part] = records.subset([t in keep for t in records.tweet_ids])
        reports, inputs = [], [rec_p, split_p]
        for name, ckpt in self._models():
            corpus, _, _, _, F = self._features(ckpt, ev["pooling"])
            inputs.append(ckpt)
            row_of = {t: i for i, t in enumerate(corpus.ids)}
            dev_pool = np.array([row_of[t] for t in splits["dev"]])
            test_pool = np.array([row_of[t] for t in splits["test"]])
            base = self.seed("eval-engagement")
            runs = []
            for r in range(int(ev["n_runs"])):
                ecfg = EngagementTrainConfig.from_dict(
                    dict(ev["engagement"], seed=base + r,
                         n_candidates=min(int(ev["n_candidates"]), len(dev_pool)), k=int(ev["k"])))
                model, _ = train_engagement_model(F, subsets["train"], row_of, ecfg,
                                                  dev=subsets["dev"], dev_pool=dev_pool)
                runs.append(hits_at_k(model, subsets["test"], F, row_of, test_pool,
                                      int(ev["n_candidates"]), int(ev["k"]), base + r))
            reports.append(MetricReport("engagement", name, ev["pooling"], self.cfg["seed"],
                                        f"hits@{ev['k']}", float(np.median(runs)), len(runs),
                                        float(np.median(runs)), runs))
        self._write_metrics("metrics_engagement.json", reports, "eval-engagement", inputs)

    def _label_split(self, corpus, labels, splits):
        row_of = {t: i for i, t in enumerate(corpus.ids)}
        out = {}
        for part in ("train", "dev", "test"):
            ids = [t for t in splits[part] if t in labels.labels]
            out[part] = (np.array([row_of[t] for t in ids], dtype=np.int64),
                         np.array([labels.labels[t] for t in ids], dtype=np.int64))
        return out

    def stage_eval_hashtag(self):
        ev = self.cfg["eval"]
        hb = ev["hashtag"]
        (lab_p,) = self.need("labels.tsv")
        splits = self._splits()
        reports, inputs = [], [lab_p]
        for name, ckpt in self._models():
            corpus, tok, params, ecfg, F = self._features(ckpt, ev["pooling"])
            inputs.append(ckpt)
            labels = load_labels(lab_p, corpus)
            C = labels.n_classes
            parts = self._label_split(corpus, labels, splits)
            (tr, ytr), (dv, ydv), (te, yte) = parts["train"], parts["dev"], parts["test"]
            clf = train_feature_classifier(F[tr], ytr, l2=float(hb["l2"]), n_classes=C)
            f1 = macro_f1(clf.predict(F[te]), yte, classes=np.arange(C))
            reports.append(MetricReport("hashtag", name, ev["pooling"], self.cfg["seed"],
                                        "macro_f1_feature", f1, 1, f1, [f1]))
            if not hb.get("finetune", True):
                continue
            base = self.seed("eval-hashtag")
            runs, runs_feat = [], []
            for r in range(int(ev["n_runs"])):
                rng = np.random.default_rng(base + r)
                sub = per_class_subsample(ytr, int(hb["finetune_per_class"]), rng)
                ft = FinetuneConfig(**dict(hb["finetune_cfg"], seed=base + r, pooling=ev["pooling"]))
                texts = corpus.texts
                p_ft, head, _ = finetune_classifier(
                    params, ecfg, tok, [texts[i] for i in tr[sub]], ytr[sub],
                    [texts[i] for i in dv], ydv, ft, n_classes=C)
                Ft = embed_tweets(p_ft, ecfg, tok, [texts[i] for i in te], ev["pooling"])
                runs.append(macro_f1(head.predict(Ft), yte, classes=np.arange(C)))
                fclf = train_feature_classifier(F[tr[sub]], ytr[sub], l2=float(hb["l2"]), n_classes=C)
                runs_feat.append(macro_f1(fclf.predict(F[te]), yte, classes=np.arange(C)))
            reports.append(MetricReport("hashtag", name, ev["pooling"], self.cfg["seed"],
                                        "macro_f1_finetune", float(np.median(runs)), len(runs),
                                        float(np.median(runs)), runs))
            reports.append(MetricReport("hashtag", name, ev["pooling"], self.cfg["seed"],
                                        "macro_f1_feature_subsample", float(np.median(runs_feat)),
                                        len(runs_feat), float(np.median(runs_feat)), runs_feat))
        self._write_metrics("metrics_hashtag.json", reports, "eval-hashtag", inputs)

    def stage_sweep(self):
        ev = self.cfg["eval"]
        sw = ev["sweep"]
        (lab_p,) = self.need("labels.tsv")
        (ckpt,) = self.need("stage2.ckpt")
        corpus, _, _, _, F = self._features(ckpt, ev["pooling"])
        labels = load_labels(lab_p, corpus)
        parts = self._label_split(corpus, labels, self._splits())
        (tr, ytr), (te, yte) = parts["train"], parts["test"]
        table = supervision_sweep(F[tr], ytr, F[te], yte, [int(b) for b in sw["budgets"]],
                                  int(sw["n_runs"]), self.seed("sweep"), float(ev["hashtag"]["l2"]))
        csv_p = self.path("sweep.csv")
        save_sweep_csv(table, csv_p)
        reports = [MetricReport("sweep", "joint", ev["pooling"], self.cfg["seed"],
                                f"macro_f1@{row['budget']}", row["median"], len(row["runs"]),
                                row["median"], row["runs"]) for row in table]
        self._write_metrics("metrics_sweep.json", reports, "sweep", [lab_p, ckpt], [csv_p])


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="soclm", description="Socially enriched LM pre-training pipeline")
    ap.add_argument("stage", choices=STAGES + ("all",))
    ap.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                    help="override one config value, e.g. --set twhin.epochs=5")
    ap.add_argument("--threads", type=int, help="worker threads for parallel kernels")
    ap.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
    ap.add_argument("--out-dir", default="runs/default")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.deterministic:
        overrides.append("deterministic=true")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        Pipeline(cfg, args.out_dir).run(args.stage)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit status
        log.debug("stage failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
