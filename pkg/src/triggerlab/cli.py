"""Experiment orchestration: a JSON config drives the pipeline

    prepare-data -> train-surrogate -> gen-trigger -> poison ->
    train-victim -> evaluate -> defend / channel-sim

with one subcommand per stage.  Stage outputs land in the --out directory,
each stamped with the config digest; reruns with an unchanged config reuse
every finished stage.  Exit codes: 0 success, 2 validation error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import attack, data, defense, dsp, evaluate as ev, features, model as mdl

STAGES = ("prepare-data", "train-surrogate", "gen-trigger", "poison",
          "train-victim", "evaluate", "defend", "channel-sim")

DEFAULT_CONFIG = {
    "data": {
        "source": "synth",              # "synth" | "dir"
        "root": None,                   # class-directory tree when source=dir
        "sample_rate": 16000,
        "synth": {"n_classes": 8, "per_class": 120, "duration_s": 1.0,
                  "seed": 0},
        "victim_classes": None,          # default: first half of the vocabulary
        "auxiliary_classes": None,       # default: second half
        "split_seed": 0,
    },
    "target_label": None,
    "features": {"sample_rate": 16000, "n_mfcc": 13, "n_fft": 2048,
                 "hop_length": 512, "n_mels": 128},
    "surrogate": {"arch": "small-cnn",
                  "train": {"epochs": 25, "batch_size": 32, "lr": 1e-3, "seed": 1}},
    "victim": {"arch": "small-cnn",
               "train": {"epochs": 25, "batch_size": 32, "lr": 1e-3, "seed": 2}},
    "trigger": {"epsilon": 0.05, "duration_s": None, "epochs": 30, "lr": 1e-3,
                "seed": 3, "noise_aware": False, "noise_snr_range": [10.0, 30.0],
                "batch_size": 4},
    "poison": {"rate": 0.7, "snr_db": 30.0, "noise": False, "seed": 4,
               "noise_snr_range": [10.0, 30.0]},
    "eval": {"position": "random", "snr_db": 30.0, "seed": 5},
    "noise_bank": {"directory": None, "size": 100, "seed": 6},
    "channel": {"distance_m": 1.0, "reference_distance_m": 1.0,
                "noise_snr_db": 20.0, "seed": 7},
    "defense": {"prune_ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                "filter_ratios": [0.0, 0.25, 0.5],
                "strip_overlays": 16, "strip_fpr": 0.05, "strip_samples": 40,
                "beatrix_suspects": 40},
    "sweep": None,                       # {dotted.key: [values]} grids
}

SEED_KEYS = (("data", "split_seed"), ("data", "synth", "seed"),
             ("surrogate", "train", "seed"), ("victim", "train", "seed"),
             ("trigger", "seed"), ("poison", "seed"), ("eval", "seed"),
             ("noise_bank", "seed"), ("channel", "seed"))


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _merge(base, override, path, problems):
    out = copy.deepcopy(base)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"unknown key {here!r}")
            continue
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, here, problems)
        else:
            out[key] = copy.deepcopy(val)
    return out


def validate_config(user_cfg: dict) -> dict:
    """Merge onto the defaults; unknown keys and missing requirements are
    all reported together."""
    problems: list = []
    cfg = _merge(DEFAULT_CONFIG, user_cfg, "", problems)
    if cfg["target_label"] is None:
        problems.append("missing required field 'target_label'")
    if cfg["data"]["source"] not in ("synth", "dir"):
        problems.append(f"data.source must be 'synth' or 'dir', got {cfg['data']['source']!r}")
    if cfg["data"]["source"] == "dir":
        root = cfg["data"]["root"]
        if root is None:
            problems.append("data.root required when data.source='dir'")
        elif not Path(root).is_dir():
            problems.append(f"data.root {root!r} does not exist")
    nb_dir = cfg["noise_bank"]["directory"]
    if nb_dir is not None and not Path(nb_dir).is_dir():
        problems.append(f"noise_bank.directory {nb_dir!r} does not exist")
    for path in SEED_KEYS:
        node = cfg
        for part in path:
            node = node[part]
        if not isinstance(node, int):
            problems.append(f"seed {'.'.join(path)} must be an explicit integer")
    if not 0.0 <= cfg["poison"]["rate"] <= 1.0:
        problems.append(f"poison.rate {cfg['poison']['rate']} outside [0, 1]")
    if cfg["eval"]["position"] not in ("random", "fixed"):
        problems.append(f"eval.position must be 'random' or 'fixed'")
    if problems:
        raise ConfigError(problems)
    return cfg


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def override_seed(cfg: dict, seed: int) -> dict:
    """Re-derive every seed field from one master seed."""
    cfg = copy.deepcopy(cfg)
    for offset, path in enumerate(SEED_KEYS):
        node = cfg
        for part in path[:-1]:
            node = node[part]
        node[path[-1]] = seed + offset
    return cfg


# ---------------------------------------------------------------------------
# pipeline context and stages
# ---------------------------------------------------------------------------

class Pipeline:
    """One experiment run rooted at `out`.  Stage methods are idempotent:
    a stage whose artifact carries the current config digest is reused."""

    def __init__(self, cfg: dict, out):
        self.cfg = cfg
        self.out = Path(out)
        self.digest = config_digest(cfg)
        self.out.mkdir(parents=True, exist_ok=True)
        with open(self.out / "config.json", "w") as fh:
            json.dump({"config": cfg, "digest": self.digest}, fh, indent=2)
        self.feature_cache: dict = {}
        self._mem: dict = {}
        f = cfg["features"]
        self.mfcc_cfg = features.MfccConfig(sample_rate=f["sample_rate"],
                                            n_mfcc=f["n_mfcc"], n_fft=f["n_fft"],
                                            hop_length=f["hop_length"],
                                            n_mels=f["n_mels"])

    # -- stamps ------------------------------------------------------------

    def _stamp_path(self, stage):
        return self.out / f".{stage}.stamp.json"

    def _stamped(self, stage) -> bool:
        p = self._stamp_path(stage)
        if not p.exists():
            return False
        try:
            with open(p) as fh:
                return json.load(fh).get("digest") == self.digest
        except (OSError, json.JSONDecodeError):
            return False

    def _stamp(self, stage):
        with open(self._stamp_path(stage), "w") as fh:
            json.dump({"stage": stage, "digest": self.digest}, fh)

    # -- dataset helpers ----------------------------------------------------

    def _write_tree(self, dataset: data.LabeledDataset, root: Path):
        root.mkdir(parents=True, exist_ok=True)
        for (w, y), sid in zip(dataset.samples, dataset.ids):
            path = root / f"{sid}.wav"
            path.parent.mkdir(parents=True, exist_ok=True)
            dsp.save_wav(w, path)

    def _full_corpus(self) -> data.LabeledDataset:
        key = "corpus"
        if key not in self._mem:
            d = self.cfg["data"]
            if d["source"] == "synth":
                s = d["synth"]
                self._mem[key] = data.synth_corpus(data.SynthConfig(
                    n_classes=s["n_classes"], per_class=s["per_class"],
                    duration_s=s["duration_s"], sample_rate=d["sample_rate"],
                    seed=s["seed"]))
            else:
                self._mem[key] = data.load_dataset(d["root"],
                                                   sample_rate=d["sample_rate"])
        return self._mem[key]

    def _class_split(self, corpus):
        d = self.cfg["data"]
        vocab = list(corpus.vocabulary)
        victim = d["victim_classes"] or vocab[:len(vocab) // 2]
        aux = d["auxiliary_classes"] or vocab[len(vocab) // 2:]
        return victim, aux

    def victim_sets(self):
        key = "victim_sets"
        if key not in self._mem:
            self.prepare_data()
            victim_all = data.load_dataset(self.out / "data" / "victim",
                                           sample_rate=self.cfg["data"]["sample_rate"])
            split = data.load_split(self.out / "splits.json")
            self._mem[key] = {part: data.split_part(victim_all, split, part)
                              for part in data.SPLIT_NAMES}
            self._mem[key]["all"] = victim_all
        return self._mem[key]

    def aux_set(self):
        key = "aux_set"
        if key not in self._mem:
            self.prepare_data()
            self._mem[key] = data.load_dataset(self.out / "data" / "auxiliary",
                                               sample_rate=self.cfg["data"]["sample_rate"])
        return self._mem[key]

    def noise_bank(self) -> dsp.NoiseBank:
        key = "noise_bank"
        if key not in self._mem:
            self.prepare_data()
            self._mem[key] = data.load_noise_bank(
                self.out / "noise", sample_rate=self.cfg["data"]["sample_rate"],
                synth_fallback=False)
        return self._mem[key]

    def surrogate_dataset(self):
        key = "d_sur"
        if key not in self._mem:
            sets = self.victim_sets()
            d_t = sets["train"].class_subset([self.cfg["target_label"]])
            self._mem[key] = attack.build_surrogate_dataset(d_t, self.aux_set())
        return self._mem[key]

    # -- stages -------------------------------------------------------------

    def prepare_data(self):
        stage = "prepare-data"
        if self._stamped(stage):
            return
        corpus = self._full_corpus()
        victim_classes, aux_classes = self._class_split(corpus)
        if self.cfg["target_label"] not in victim_classes:
            raise RuntimeError(f"target label {self.cfg['target_label']!r} "
                               f"not among victim classes {victim_classes}")
        victim_all = corpus.class_subset(victim_classes)
        aux = corpus.class_subset(aux_classes)
        self._write_tree(victim_all, self.out / "data" / "victim")
        self._write_tree(aux, self.out / "data" / "auxiliary")
        split = data.stratified_split(victim_all, self.cfg["data"]["split_seed"])
        data.save_split(split, self.out / "splits.json")
        nb = self.cfg["noise_bank"]
        bank = data.load_noise_bank(nb["directory"],
                                    sample_rate=self.cfg["data"]["sample_rate"],
                                    size=nb["size"], seed=nb["seed"])
        noise_dir = self.out / "noise"
        noise_dir.mkdir(exist_ok=True)
        for i, w in enumerate(bank.noises):
            dsp.save_wav(w, noise_dir / f"noise{i:03d}.wav")
        self._mem.pop("victim_sets", None)
        self._mem.pop("aux_set", None)
        self._mem.pop("noise_bank", None)
        self._stamp(stage)

    def _train_cfg(self, section) -> mdl.TrainConfig:
        t = self.cfg[section]["train"]
        return mdl.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                               lr=t["lr"], seed=t["seed"])

    def _build(self, section, vocabulary) -> mdl.NetworkModel:
        arch_name = self.cfg[section]["arch"]
        if arch_name not in mdl.ARCH_FACTORIES:
            raise RuntimeError(f"unknown architecture {arch_name!r}")
        sets = self.victim_sets()
        shape = (self.mfcc_cfg.n_mfcc, self.mfcc_cfg.n_frames(sets["all"].duration))
        arch = mdl.ARCH_FACTORIES[arch_name](shape, len(vocabulary))
        return mdl.build_model(arch, self.cfg[section]["train"]["seed"],
                               vocabulary=vocabulary, feature_config=self.mfcc_cfg)

    def train_surrogate(self) -> mdl.NetworkModel:
        stage = "train-surrogate"
        path = self.out / "surrogate.npz"
        if self._stamped(stage):
            return mdl.load_model(path)
        self.prepare_data()
        d_sur = self.surrogate_dataset()
        net = self._build("surrogate", d_sur.vocabulary)
        net, history = mdl.train(net, d_sur, self._train_cfg("surrogate"),
                                 feature_cache=self.feature_cache)
        mdl.save_model(net, path)
        with open(self.out / "surrogate_history.json", "w") as fh:
            json.dump({"digest": self.digest, "history": history}, fh, indent=2)
        self._stamp(stage)
        return net

    def gen_trigger(self) -> attack.Trigger:
        stage = "gen-trigger"
        path = self.out / "trigger.wav"
        if self._stamped(stage):
            return attack.load_trigger(path)
        surrogate = self.train_surrogate()
        t = self.cfg["trigger"]
        gen_cfg = attack.TriggerGenConfig(
            epsilon=t["epsilon"], duration_s=t["duration_s"], epochs=t["epochs"],
            lr=t["lr"], seed=t["seed"], noise_aware=t["noise_aware"],
            noise_snr_range=tuple(t["noise_snr_range"]), batch_size=t["batch_size"])
        bank = self.noise_bank() if t["noise_aware"] else None
        trigger = attack.generate_trigger(surrogate, self.surrogate_dataset(),
                                          self.cfg["target_label"], gen_cfg, bank)
        attack.save_trigger(trigger, path)
        self._stamp(stage)
        return attack.load_trigger(path)

    def poison(self):
        stage = "poison"
        manifest_path = self.out / "manifest.json"
        if self._stamped(stage):
            poisoned = data.load_dataset(self.out / "poisoned",
                                         sample_rate=self.cfg["data"]["sample_rate"])
            return poisoned, attack.load_manifest(manifest_path)
        trigger = self.gen_trigger()
        sets = self.victim_sets()
        p = self.cfg["poison"]
        bank = self.noise_bank() if p["noise"] else None
        poisoned, manifest = attack.poison_dataset(
            sets["train"], self.cfg["target_label"], p["rate"], trigger,
            p["snr_db"], noise=bank, seed=p["seed"],
            noise_snr_range=tuple(p["noise_snr_range"]))
        self._write_tree(poisoned, self.out / "poisoned")
        attack.save_manifest(manifest, manifest_path)
        self._stamp(stage)
        return poisoned, manifest

    def train_victim(self) -> mdl.NetworkModel:
        stage = "train-victim"
        path = self.out / "victim.npz"
        if self._stamped(stage):
            return mdl.load_model(path)
        poisoned, _ = self.poison()
        net = self._build("victim", poisoned.vocabulary)
        net, history = mdl.train(net, poisoned, self._train_cfg("victim"),
                                 feature_cache=self.feature_cache)
        mdl.save_model(net, path)
        with open(self.out / "victim_history.json", "w") as fh:
            json.dump({"digest": self.digest, "history": history}, fh, indent=2)
        self._stamp(stage)
        return net

    def evaluate(self) -> ev.EvalReport:
        stage = "evaluate"
        path = self.out / "report.json"
        if self._stamped(stage):
            return ev.read_report(path)
        victim = self.train_victim()
        trigger = self.gen_trigger()
        sets = self.victim_sets()
        e = self.cfg["eval"]
        ba = ev.benign_accuracy(victim, sets["test"], feature_cache=self.feature_cache)
        asr = ev.attack_success_rate(victim, sets["test"], trigger,
                                     snr=e["snr_db"], position=e["position"],
                                     seed=e["seed"], feature_cache=self.feature_cache)
        n_target = sum(1 for _, y in sets["test"].samples
                       if sets["test"].vocabulary[y] == self.cfg["target_label"])
        report = ev.EvalReport(ba=ba, asr=asr, benign_count=len(sets["test"]),
                               attack_count=len(sets["test"]) - n_target,
                               config_digest=self.digest,
                               class_names=list(sets["test"].vocabulary))
        ev.write_report(report, path)
        self._stamp(stage)
        return report

    def defend(self) -> dict:
        stage = "defend"
        ddir = self.out / "defense"
        if self._stamped(stage):
            with open(ddir / "summary.json") as fh:
                return json.load(fh)
        victim = self.train_victim()
        trigger = self.gen_trigger()
        sets = self.victim_sets()
        dcfg = self.cfg["defense"]
        e = self.cfg["eval"]
        ddir.mkdir(exist_ok=True)
        rng = np.random.default_rng([e["seed"], 1])

        prune = defense.fine_prune_curve(victim, sets["val"], dcfg["prune_ratios"],
                                         sets["test"], trigger, e["snr_db"],
                                         seed=e["seed"])
        with open(ddir / "prune.json", "w") as fh:
            json.dump({"digest": self.digest, "ranking": prune.ranking,
                       "curve": prune.curve}, fh, indent=2)

        # STRIP: entropy of benign vs poisoned test samples
        test = sets["test"]
        overlays_pool = [w for w, _ in sets["train"].samples]
        overlay_idx = rng.choice(len(overlays_pool), size=dcfg["strip_overlays"],
                                 replace=False)
        overlays = [overlays_pool[i] for i in overlay_idx]
        n_strip = min(dcfg["strip_samples"], len(test))
        pick = rng.choice(len(test), size=n_strip, replace=False)
        benign_H = [defense.strip_entropy(victim, test.samples[i][0], overlays).entropy
                    for i in pick]
        poisoned_test = ev.poison_test_set(test, trigger, e["snr_db"],
                                           e["position"], e["seed"])
        pick_p = rng.choice(len(poisoned_test), size=min(n_strip, len(poisoned_test)),
                            replace=False)
        poison_H = [defense.strip_entropy(victim, poisoned_test.samples[i][0],
                                          overlays).entropy for i in pick_p]
        thr = defense.strip_threshold(benign_H, dcfg["strip_fpr"])
        detection = float(np.mean([h < thr for h in poison_H]))
        strip_blob = {"digest": self.digest, "threshold_bits": thr,
                      "benign_entropy": benign_H, "poisoned_entropy": poison_H,
                      "false_positive_rate": dcfg["strip_fpr"],
                      "detection_rate": detection}
        with open(ddir / "strip.json", "w") as fh:
            json.dump(strip_blob, fh, indent=2)

        # filter defense: BA/ASR after dropping sample points
        filt = []
        n0 = sets["test"].duration
        for f in dcfg["filter_ratios"]:
            def transform(w, f=f):
                return defense.pad_to_length(defense.filter_defense(w, f), n0)
            fb = [transform(w) for w, _ in test.samples]
            feats = features.batch_features(fb, victim.feature_config)
            preds = mdl.predict_batch(victim, feats).argmax(axis=1)
            labels = np.array([y for _, y in test.samples])
            ba_f = float((preds == labels).mean())
            asr_f = ev.attack_success_rate(victim, test, trigger, snr=e["snr_db"],
                                           position=e["position"], seed=e["seed"],
                                           transform=transform)
            filt.append({"ratio": f, "ba": ba_f, "asr": asr_f})
        with open(ddir / "filter.json", "w") as fh:
            json.dump({"digest": self.digest, "curve": filt}, fh, indent=2)

        # Gram-matrix anomaly index over predicted-class suspects
        benign_by_class = {}
        train_set = sets["train"]
        for name in train_set.vocabulary:
            members = [w for (w, y) in train_set.samples
                       if train_set.vocabulary[y] == name]
            benign_by_class[name] = members[:dcfg["beatrix_suspects"]]
        suspects = [w for w, _ in poisoned_test.samples[:dcfg["beatrix_suspects"]]]
        anomaly = defense.beatrix_index(victim, benign_by_class, suspects)
        with open(ddir / "beatrix.json", "w") as fh:
            json.dump({"digest": self.digest, "deviations": anomaly.deviations,
                       "anomaly_index": anomaly.anomaly_index,
                       "threshold": anomaly.threshold,
                       "flagged": anomaly.flagged}, fh, indent=2)

        summary = {"digest": self.digest,
                   "prune_curve": prune.curve, "strip": strip_blob,
                   "filter_curve": filt,
                   "beatrix_flagged": anomaly.flagged}
        with open(ddir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2)
        self._stamp(stage)
        return summary

    def channel_sim(self) -> dict:
        stage = "channel-sim"
        path = self.out / "channel_report.json"
        if self._stamped(stage):
            with open(path) as fh:
                return json.load(fh)
        victim = self.train_victim()
        trigger = self.gen_trigger()
        sets = self.victim_sets()
        bank = self.noise_bank()
        c = self.cfg["channel"]
        e = self.cfg["eval"]

        def through_channel(w, _c=[0]):
            cfg = dsp.ChannelConfig(distance_m=c["distance_m"],
                                    reference_distance_m=c["reference_distance_m"],
                                    noise_snr_db=c["noise_snr_db"],
                                    seed=c["seed"] + _c[0])
            _c[0] += 1
            return dsp.simulate_channel(w, bank, cfg)

        test = sets["test"]
        waves = [through_channel(w) for w, _ in test.samples]
        feats = features.batch_features(waves, victim.feature_config)
        labels = np.array([y for _, y in test.samples])
        ba = float((mdl.predict_batch(victim, feats).argmax(axis=1) == labels).mean())
        asr = ev.attack_success_rate(victim, test, trigger, snr=e["snr_db"],
                                     position=e["position"], seed=e["seed"],
                                     transform=through_channel)
        blob = {"digest": self.digest, "ba": ba, "asr": asr,
                "distance_m": c["distance_m"], "noise_snr_db": c["noise_snr_db"]}
        with open(path, "w") as fh:
            json.dump(blob, fh, indent=2)
        self._stamp(stage)
        return blob

    def run(self, upto: str = "evaluate"):
        if upto not in STAGES:
            raise RuntimeError(f"unknown stage {upto!r}")
        order = {"prepare-data": self.prepare_data,
                 "train-surrogate": self.train_surrogate,
                 "gen-trigger": self.gen_trigger,
                 "poison": self.poison,
                 "train-victim": self.train_victim,
                 "evaluate": self.evaluate,
                 "defend": self.defend,
                 "channel-sim": self.channel_sim}
        for stage in STAGES[:STAGES.index(upto) + 1]:
            order[stage]()


def run_experiment(user_cfg: dict, out, upto: str = "evaluate") -> Pipeline:
    cfg = validate_config(user_cfg)
    pipe = Pipeline(cfg, out)
    pipe.run(upto)
    return pipe


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------

def _set_dotted(cfg: dict, dotted: str, value):
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def expand_sweep(user_cfg: dict):
    """Cross product of the config's sweep grid; yields (name, config)."""
    grid = user_cfg.get("sweep") or {}
    base = {k: v for k, v in user_cfg.items() if k != "sweep"}
    if not grid:
        yield "point0000", base
        return
    keys = sorted(grid)
    counts = [len(grid[k]) for k in keys]
    total = int(np.prod(counts))
    for idx in range(total):
        cfg = copy.deepcopy(base)
        rem, tag = idx, []
        for k, c in zip(keys, counts):
            choice = rem % c
            rem //= c
            _set_dotted(cfg, k, grid[k][choice])
            tag.append(f"{k.split('.')[-1]}={grid[k][choice]}")
        yield f"point{idx:04d}_" + "_".join(tag), cfg


def _run_sweep_point(args):
    name, cfg, out, upto = args
    run_experiment(cfg, Path(out) / name, upto)
    return name


def run_sweep(user_cfg: dict, out, upto: str = "evaluate", jobs: int = 1):
    points = list(expand_sweep(user_cfg))
    for name, cfg in points:
        validate_config(cfg)     # fail fast on every grid point
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_sweep_point,
                          [(n, c, out, upto) for n, c in points]))
    else:
        for n, c in points:
            _run_sweep_point((n, c, out, upto))
    return [n for n, _ in points]


def collect_reports(out) -> list:
    """Gather evaluation reports under a sweep/run directory."""
    rows = []
    for path in sorted(Path(out).rglob("report.json")):
        rep = ev.read_report(path)
        rows.append({"run": str(path.parent.relative_to(out)),
                     "ba": rep.ba, "asr": rep.asr,
                     "config_digest": rep.config_digest})
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _load_config(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="triggerlab",
                                     description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    stage_of = {"prepare-data": "prepare-data", "train-surrogate": "train-surrogate",
                "gen-trigger": "gen-trigger", "poison": "poison",
                "train-victim": "train-victim", "evaluate": "evaluate",
                "defend": "defend", "channel-sim": "channel-sim"}
    for name in list(stage_of) + ["run", "sweep", "report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name != "report")
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--stage", default=None,
                       help="with 'run'/'sweep': stop after this stage")
        p.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    if args.command == "report":
        rows = collect_reports(args.out)
        json.dump(rows, sys.stdout, indent=2)
        print()
        return 0

    try:
        user_cfg = _load_config(args.config)
        if args.seed is not None:
            user_cfg = override_seed(validate_config(user_cfg), args.seed)
        if args.command == "sweep":
            validate_config({k: v for k, v in user_cfg.items() if k != "sweep"})
        else:
            validate_config(user_cfg)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "sweep":
            run_sweep(user_cfg, args.out, upto=args.stage or "evaluate",
                      jobs=args.jobs)
        elif args.command == "run":
            run_experiment(user_cfg, args.out, upto=args.stage or "evaluate")
        else:
            run_experiment(user_cfg, args.out, upto=stage_of[args.command])
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except Exception as exc:            # stage failures keep finished artifacts
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
