"""Command-line entry point: gen-data, train, convert, eval, ablate.

Everything lives under one base directory (``--base-dir``, ``paths.base_dir`` or
$EMOPREFIX_HOME):

    corpus/       manifest.jsonl, corpus.json, mels/*.mel
    checkpoints/  tokenizer.npz probes.npz backbone.npz stage2.npz prefix-<mode>.npz
    runs/         logs/<stage>.csv, converted/, eval/, ablation.csv

Exit codes: 0 ok, 2 config, 3 data/input, 4 state/pipeline order, 5 numeric,
6 frozen-parameter violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path


from . import evalkit
from .acoustic_model import FlowDecoder
from .config import RunConfig, load_config
from .errors import ConfigError, EmoPrefixError, InputError, PipelineOrderError, StateError
from .numerics import module_state
from .pipeline import (
    SETTINGS,
    ControlSetting,
    Conversion,
    Converted,
    ModelBundle,
    Probes,
    Variant,
    convert,
    load_stage,
    module_from_sections,
    plan_conversions,
    pretrain_backbone,
    save_stage,
    train_codebook,
    train_prefix,
    train_probes,
    train_stage2,
)
from .prefix_encoder import PrefixEncoder
from .probes import FrameClassifier, MeanPoolClassifier
from .sequence_model import SequenceModel
from .toyspeech import EMOTION_NAMES, Codebook, Corpus, UtteranceSpec, read_mel, read_tokens, write_mel, write_tokens

log = logging.getLogger("emoprefix")

STAGES = ("tokenizer", "probes", "backbone", "stage2", "prefix")
PREFIX_MODES = ("deep-prefix", "input-prepend")
MODE_ALIASES = {"prepend": "input-prepend", "deep": "deep-prefix"}


def _mode(name: str) -> str:
    m = MODE_ALIASES.get(name, name)
    if m not in PREFIX_MODES + ("none",):
        raise ConfigError(f"unknown mode {name!r}")
    return m


class Workspace:
    """Resolves artifact paths and loads upstream stages in dependency order."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._cache: dict = {}

    @property
    def corpus_dir(self) -> Path:
        return self.cfg.path("corpus")

    @property
    def manifest(self) -> Path:
        return self.corpus_dir / "manifest.jsonl"

    def ckpt(self, stage: str, mode: str | None = None) -> Path:
        name = f"prefix-{mode}" if stage == "prefix" else stage
        return self.cfg.path("checkpoints") / f"{name}.npz"

    def log_path(self, stage: str, mode: str | None = None) -> Path:
        name = f"prefix-{mode}" if stage == "prefix" else stage
        return self.cfg.path("runs") / "logs" / f"{name}.csv"

    def upstream(self, stage: str) -> dict[str, Path]:
        deps = {
            "tokenizer": {"corpus": self.manifest},
            "probes": {"corpus": self.manifest},
            "backbone": {"tokenizer": self.ckpt("tokenizer")},
            "stage2": {"tokenizer": self.ckpt("tokenizer")},
            "prefix": {"tokenizer": self.ckpt("tokenizer"), "probes": self.ckpt("probes"),
                       "backbone": self.ckpt("backbone")},
        }[stage]
        for name, p in deps.items():
            if not p.exists():
                hint = "gen-data" if name == "corpus" else f"train --stage {name}"
                raise PipelineOrderError(f"stage {stage!r} needs {name!r} ({p} is missing); run `{hint}` first")
        return deps

    # -- loaders -----------------------------------------------------------

    def corpus(self) -> Corpus:
        if "corpus" not in self._cache:
            if not self.manifest.exists():
                raise PipelineOrderError(f"no corpus at {self.corpus_dir}; run `gen-data` first")
            self._cache["corpus"] = Corpus.load(self.corpus_dir)
        return self._cache["corpus"]

    def codebook(self) -> Codebook:
        sections, _ = load_stage(self.ckpt("tokenizer"), "tokenizer", self.upstream("tokenizer"))
        return Codebook.from_state(self.corpus().gcfg, sections["codebook"])

    def probes(self) -> Probes:
        sections, _ = load_stage(self.ckpt("probes"), "probes", self.upstream("probes"))
        g = self.corpus().gcfg
        return Probes(
            module_from_sections(MeanPoolClassifier(g.n_mel, g.n_emotions, self.cfg.prefix.d_emo), sections["emotion_embedder"]),
            module_from_sections(MeanPoolClassifier(g.n_mel, g.n_emotions, 16), sections["emotion"]),
            module_from_sections(MeanPoolClassifier(g.n_mel, g.n_speakers, 16), sections["speaker"]),
            module_from_sections(FrameClassifier(g.n_mel, g.n_phonemes), sections["content"]),
        )

    def backbone(self) -> tuple[SequenceModel, dict]:
        sections, meta = load_stage(self.ckpt("backbone"), "backbone", self.upstream("backbone"))
        return module_from_sections(SequenceModel(self.cfg.sequence), sections["backbone"]).eval(), meta

    def stage2(self) -> tuple[FlowDecoder, dict]:
        sections, meta = load_stage(self.ckpt("stage2"), "stage2", self.upstream("stage2"))
        return module_from_sections(FlowDecoder(self.cfg.acoustic), sections["model"]).eval(), meta

    def prefix(self, mode: str) -> tuple[SequenceModel, PrefixEncoder, dict]:
        path = self.ckpt("prefix", mode)
        if not path.exists():
            raise PipelineOrderError(f"missing 'prefix' checkpoint for mode {mode}; run `train --stage prefix --mode {mode}`")
        sections, meta = load_stage(path, "prefix", self.upstream("prefix"))
        model = SequenceModel(self.cfg.sequence)
        model.prepare_finetune(deep_prefix=mode == "deep-prefix", seed=self.cfg.train.seed + 3)
        module_from_sections(model, sections["backbone"], sections["lora"], sections.get("prefix_projections", {}))
        encoder = module_from_sections(PrefixEncoder(self.cfg.prefix), sections["encoder"])
        return model.eval(), encoder.eval(), meta

    def bundle(self, modes=()) -> ModelBundle:
        backbone, _ = self.backbone()
        stage2, _ = self.stage2()
        b = ModelBundle(self.cfg, self.corpus(), self.codebook(), self.probes(), backbone, stage2)
        for m in modes:
            model, enc, _ = self.prefix(m)
            b.variants[m] = Variant(model, m, enc, m)
        return b


def _write_log(path: Path, rows, append: bool):
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "loss"])
        w.writerows((int(s), repr(float(l))) for s, l in rows)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.path("corpus")
    if (out / "manifest.jsonl").exists() and not args.force:
        raise StateError(f"{out} already holds a corpus; pass --force to overwrite")
    corpus = Corpus(cfg.corpus, cfg.split)
    manifest = corpus.save(out)
    n = len(corpus.all_specs)
    print(f"wrote {n} utterances to {out} (manifest {manifest.name})")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    stage = args.stage
    mode = _mode(args.mode) if stage == "prefix" else None
    if mode == "none":
        raise ConfigError("prefix training needs --mode deep-prefix or input-prepend")
    upstream = ws.upstream(stage)
    corpus = ws.corpus()
    target = ws.ckpt(stage, mode)
    meta = {"stage": stage, "config": cfg.fingerprint()}
    rows: list = []

    if stage == "tokenizer":
        cb = train_codebook(corpus, cfg)
        rows.append((cfg.tokenizer.iters, cb.error_q95))
        save_stage(target, {"codebook": cb.state()}, upstream, {**meta, "step": cfg.tokenizer.iters})
    elif stage == "probes":
        p = train_probes(corpus, cfg)
        sections = {k: module_state(getattr(p, k)) for k in ("emotion_embedder", "emotion", "speaker", "content")}
        accs = {k: float(getattr(p, k).heldout_accuracy) for k in sections}
        rows.append((cfg.train.probe_steps, 1.0 - min(accs.values())))
        save_stage(target, sections, upstream, {**meta, "step": cfg.train.probe_steps, "heldout_accuracy": accs})
    else:
        codebook = ws.codebook()
        total = {"backbone": cfg.train.backbone_steps, "stage2": cfg.train.stage2_steps, "prefix": cfg.train.prefix_steps}[stage]
        start, state = 0, None
        if args.resume and target.exists():
            if stage == "prefix":
                model, enc, old = ws.prefix(mode)
                state = (model.train(), enc.train())
            elif stage == "backbone":
                model, old = ws.backbone()
                state = model.train()
            else:
                model, old = ws.stage2()
                state = model.train()
            start = int(old["step"])
            if start >= total:
                print(f"{stage} already trained for {start} steps (target {total}); nothing to do")
                return 0
        if stage == "backbone":
            model = pretrain_backbone(corpus, codebook, cfg, rows, state, start)
            sections = {"backbone": module_state(model)}
        elif stage == "stage2":
            model = train_stage2(corpus, codebook, cfg, rows, state, start)
            sections = {"model": module_state(model)}
        else:
            backbone, _ = ws.backbone()
            model, enc = train_prefix(corpus, codebook, backbone, ws.probes().emotion_embedder, cfg, mode, rows, state, start)
            model.check_frozen()
            sections = {k: {n: t.detach().numpy() for n, t in v.items()} for k, v in model.sections().items()}
            sections["encoder"] = module_state(enc)
        save_stage(target, sections, upstream, {**meta, "step": total, "mode": mode})
        _write_log(ws.log_path(stage, mode), rows, append=start > 0)
        print(f"trained {stage}{f' [{mode}]' if mode else ''}: steps {start + 1}..{total}, final loss {rows[-1][1]:.4f}")
        print(f"checkpoint {target}")
        return 0

    _write_log(ws.log_path(stage), rows, append=False)
    print(f"trained {stage}; checkpoint {target}")
    return 0


def _setting_from_flags(args) -> ControlSetting:
    explicit = {k: v for k, v in (("stage1", args.stage1_ref), ("stage2", args.stage2_ref)) if v}
    if args.preset:
        preset = SETTINGS[args.preset]
        wanted = {"stage1": preset.stage1_ref_emotion, "stage2": preset.stage2_ref_emotion}
        clash = [k for k, v in explicit.items() if wanted[k] != v]
        if clash:
            raise ConfigError(f"--preset {args.preset} fixes {', '.join(f'{k}-ref={wanted[k]}' for k in clash)}; "
                              "drop the conflicting --stage*-ref flag")
        return preset
    s1, s2 = explicit.get("stage1", "target"), explicit.get("stage2", "target")
    named = [s for s in SETTINGS.values() if (s.stage1_ref_emotion, s.stage2_ref_emotion) == (s1, s2)]
    return named[0] if named else ControlSetting(s1, s2, "custom")


def _parse_uid(uid: str, corpus: Corpus) -> UtteranceSpec:
    try:
        c, s, e = uid.split("_")
        spec = corpus.spec(int(c.lstrip("c")), int(s.lstrip("s")), int(e.lstrip("e")))
    except ValueError:
        raise InputError(f"utterance id {uid!r} should look like c012_s1_e0") from None
    if spec not in set(corpus.all_specs):
        raise InputError(f"utterance {uid} is not in the corpus")
    return spec


def _emotion(value: str, corpus: Corpus) -> int:
    names = list(EMOTION_NAMES[: corpus.gcfg.n_emotions])
    if value in names:
        return names.index(value)
    try:
        e = int(value)
    except ValueError:
        raise InputError(f"unknown emotion {value!r}; choose from {names}") from None
    if not 0 <= e < corpus.gcfg.n_emotions:
        raise InputError(f"emotion id {e} out of range")
    return e


def _spec_dict(s: UtteranceSpec) -> dict:
    return {**asdict(s), "uid": s.uid}


def _write_converted(out: Path, item: Converted, meta: dict) -> Path:
    c = item.conversion
    stem = out / f"{c.source.uid}-to-e{c.target_emotion}-ref{c.stage1_ref.content_id:03d}"
    write_mel(stem.with_suffix(".mel"), item.mel)
    write_tokens(stem.with_suffix(".tok"), item.tokens)
    record = {
        **meta,
        "source": _spec_dict(c.source), "target_emotion": c.target_emotion,
        "stage1_ref": _spec_dict(c.stage1_ref), "stage2_ref": _spec_dict(c.stage2_ref),
        "mel": stem.with_suffix(".mel").name, "tokens": stem.with_suffix(".tok").name,
        "n_tokens": len(item.tokens), "truncated": bool(item.tokens.truncated),
    }
    stem.with_suffix(".json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return stem


def cmd_convert(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    mode = _mode(args.mode)
    setting = _setting_from_flags(args)
    corpus = ws.corpus()
    bundle = ws.bundle([mode] if mode != "none" else [])
    variant = bundle.variant("baseline" if mode == "none" else mode)
    if args.plan:
        conversions = plan_conversions(corpus, setting, cfg)
    else:
        if not (args.source and args.target_emotion is not None):
            raise ConfigError("convert needs --source and --target-emotion (or --plan)")
        src = _parse_uid(args.source, corpus)
        tgt = _emotion(args.target_emotion, corpus)
        ref_c = int(args.reference) if args.reference is not None else int(corpus.split.reference_contents[0])
        if ref_c not in corpus.split.reference_contents:
            raise InputError(f"content {ref_c} is not a reference content; choose from {corpus.split.reference_contents}")
        e1 = tgt if setting.stage1_ref_emotion == "target" else src.emotion_id
        e2 = tgt if setting.stage2_ref_emotion == "target" else src.emotion_id
        conversions = [Conversion(src, tgt, corpus.spec(ref_c, src.speaker_id, e1), corpus.spec(ref_c, src.speaker_id, e2))]
    out = Path(args.out) if args.out else cfg.path("runs") / "converted" / f"{mode}-{setting.name}"
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "mode": mode, "setting": setting.name, "stage1_ref_emotion": setting.stage1_ref_emotion,
        "stage2_ref_emotion": setting.stage2_ref_emotion, "preset": args.preset,
        "sampling": asdict(cfg.sampling), "config": evalkit.fingerprint_digest(cfg.fingerprint()),
    }
    items = convert(bundle, variant, conversions)
    for item in items:
        stem = _write_converted(out, item, meta)
    print(f"wrote {len(items)} conversion(s) to {out}" + (f" ({stem.name})" if len(items) == 1 else ""))
    return 0


def _load_converted(directory: Path, corpus: Corpus) -> tuple[list[Converted], list[dict]]:
    if not directory.is_dir():
        raise InputError(f"{directory} is not a directory")
    records = sorted(directory.glob("*.json"))
    items, metas = [], []
    for p in records:
        rec = json.loads(p.read_text())
        if "target_emotion" not in rec:
            continue
        spec = lambda d: UtteranceSpec(d["content_id"], d["speaker_id"], d["emotion_id"], d["seed"])  # noqa: E731
        conv = Conversion(spec(rec["source"]), int(rec["target_emotion"]), spec(rec["stage1_ref"]), spec(rec["stage2_ref"]))
        items.append(Converted(conv, read_tokens(directory / rec["tokens"]), read_mel(directory / rec["mel"])))
        metas.append(rec)
    if not items:
        raise InputError(f"no converted utterances found in {directory}")
    return items, metas


def cmd_eval(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    corpus = ws.corpus()
    directory = Path(args.converted)
    items, metas = _load_converted(directory, corpus)
    bundle = ModelBundle(cfg, corpus, ws.codebook(), ws.probes(), None, None)
    fp = {k: sorted({m.get(k) for m in metas}, key=str) for k in ("mode", "setting", "stage1_ref_emotion", "stage2_ref_emotion", "config")}
    fp["eval_seed"] = cfg.eval.seed
    report, rows = evalkit.evaluate(bundle, items, fp)
    out = Path(args.out) if args.out else directory / "eval"
    evalkit.write_csv(out.with_name(out.name + "-utterances.csv"), rows)
    js, cs = report.write(out)
    print(f"ECA {report.eca:.3f}  Emo SIM {report.emo_sim:.3f}  Spk-Cent SIM {report.spk_cent_sim:.3f}  "
          f"EER {report.eer:.3f}  content {report.content_acc:.3f}  (n={report.n_utterances})")
    print(f"report {js}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    modes = [_mode(m) for m in args.modes]
    bundle = ws.bundle(modes)
    out = Path(args.out) if args.out else cfg.path("runs") / "ablation.csv"
    table = evalkit.ablation_grid(bundle, ["baseline", modes[0]])
    evalkit.write_csv(out, table)
    for r in table:
        print(f"{r['model']:>14} {r['setting']:>9}  ECA {r['eca']:.3f}  EER {r['eer']:.3f}  Spk-Cent {r['spk_cent_sim']:.3f}")
    if len(modes) > 1:
        rows = []
        for m in modes:
            report, _ = evalkit.run_stage_isolation(bundle, m, "joint")
            rows.append({"model": m, "setting": "joint", **report.csv_row()})
        evalkit.write_csv(out.with_name(out.stem + "-modes.csv"), rows)
        for r in rows:
            print(f"{r['model']:>14}     joint  ECA {r['eca']:.3f}")
    print(f"table {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emoprefix", description=__doc__.split("\n\n")[0])
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (repeatable)")
    ap.add_argument("--base-dir", help="artifact directory (default: $EMOPREFIX_HOME or .)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--out", help="corpus directory (default: <base>/corpus)")
    p.add_argument("--force", action="store_true", help="overwrite an existing corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--mode", default="deep-prefix", help="prefix stage only: deep-prefix or input-prepend")
    p.add_argument("--resume", action="store_true", help="continue from the stage's checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="run the two-stage conversion")
    p.add_argument("--source", help="source utterance id, e.g. c072_s1_e0")
    p.add_argument("--target-emotion", help="emotion name or id")
    p.add_argument("--reference", help="reference content id (default: first reference content)")
    p.add_argument("--mode", default="deep-prefix", help="deep-prefix, prepend or none")
    p.add_argument("--stage1-ref", choices=("source", "target"))
    p.add_argument("--stage2-ref", choices=("source", "target"))
    p.add_argument("--preset", choices=sorted(SETTINGS), help="named control setting")
    p.add_argument("--plan", action="store_true", help="convert the whole planned test set")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="score a directory of conversions")
    p.add_argument("converted", help="directory written by `convert`")
    p.add_argument("--out", help="report path stem (default: <converted>/eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="baseline vs prefix model under the three control settings")
    p.add_argument("--modes", nargs="+", default=["deep-prefix"], help="prefix variants; the first fills the grid")
    p.add_argument("--out", help="CSV path (default: <base>/runs/ablation.csv)")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        overrides = {}
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            overrides[k.strip()] = v
        if args.base_dir:
            overrides["paths.base_dir"] = args.base_dir
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except EmoPrefixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
