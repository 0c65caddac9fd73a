"""File-based pipeline: split, embed, base models, stacking, ensembling, evaluation.

Every stage reads its inputs from and writes its outputs to the work
directory.  Prediction and feature files carry a partition tag in their first
line and loaders refuse files from the wrong partition: stacking may only
learn from ``inner_test`` and the final evaluation may only read
``local_test``.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from typing import Callable, Optional, Sequence

import numpy as np

from . import ingest
from .config import PipelineConfig
from .embed import EmbeddingTable, session_items, train_item2vec
from .ensemble import MODES, StackRow, build_stack_rows, cold_start_list, route, train_stacker
from .evaluation import EvalReport, evaluate, impression_baseline, write_submission
from .gbdt import FeatureRow, TreeEnsemble, extract_features, rank_group, train_reranker
from .ingest import Session
from .mf import LatentModel, build_interactions, rank_impressions, train_mf
from .ranking import RankedList
from .seqrank import (
    GruRanker,
    build_item_index,
    make_batches,
    predict_clickout,
    train_rnn,
    training_examples,
)

_logger = logging.getLogger(__name__)

PARTITIONS = ("local_train", "local_test", "inner_train", "inner_test")
# base-model stage -> (training partition, partition it predicts)
STAGES = {"inner": ("inner_train", "inner_test"), "local": ("local_train", "local_test")}


class ProvenanceError(RuntimeError):
    """An artifact was loaded from a partition the consuming stage may not read."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# --- tagged artifacts -------------------------------------------------------


def _write_tag(f, partition: str, kind: str):
    f.write(f"# partition={partition} kind={kind}\n")


def _check_tag(line: str, path, expect: str) -> str:
    if not line.startswith("# partition="):
        raise ProvenanceError(f"{path}: missing partition tag")
    tag = dict(kv.split("=", 1) for kv in line[2:].split())
    if tag["partition"] != expect:
        raise ProvenanceError(f"{path}: holds {tag['partition']} data, this stage may only read {expect}")
    return tag["partition"]


def write_predictions(preds: Sequence[RankedList], path, partition: str):
    with open(path, "w", newline="", encoding="utf-8") as f:
        _write_tag(f, partition, "predictions")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["session_id", "user_id", "timestamp", "step", "items", "scores"])
        for p in preds:
            scores = "" if p.scores is None else " ".join(repr(float(s)) for s in p.scores)
            w.writerow([p.session_id, p.user_id, p.timestamp, p.step, " ".join(p.items), scores])


def read_predictions(path, expect: str) -> dict[str, RankedList]:
    with open(path, newline="", encoding="utf-8") as f:
        _check_tag(f.readline(), path, expect)
        reader = csv.reader(f)
        next(reader)
        out = {}
        for row in reader:
            scores = [float(s) for s in row[5].split()] if row[5] else None
            out[row[0]] = RankedList(row[0], row[4].split(), scores, user_id=row[1],
                                     timestamp=int(row[2]), step=int(row[3]))
        return out


def write_tagged_rows(rows: Sequence, cls, path, partition: str):
    import dataclasses

    names = [fl.name for fl in dataclasses.fields(cls)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        _write_tag(f, partition, cls.__name__)
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, n) for n in names)])


def read_tagged_rows(path, cls, expect: str) -> list:
    import dataclasses

    kinds = {fl.name: fl.type for fl in dataclasses.fields(cls)}
    with open(path, newline="", encoding="utf-8") as f:
        _check_tag(f.readline(), path, expect)
        out = []
        for rec in csv.DictReader(f):
            kw = {}
            for k, v in rec.items():
                t = kinds[k]
                kw[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
            out.append(cls(**kw))
        return out


# --- helpers shared by the pipeline and by manual composition ---------------


def predictable(sessions: Sequence[Session]) -> list[Session]:
    """Masked sessions whose target clickout has impressions."""
    out = []
    for s in sessions:
        t = s.target()
        if t is not None and t.impressions:
            out.append(s)
    return out


def mf_ranker(model: LatentModel, price_model: Optional[LatentModel]) -> Callable[[Session], RankedList]:
    def rank(session: Session) -> RankedList:
        t = session.target()
        return rank_impressions(model, price_model, session.user_id, list(t.impressions), t.prices,
                                session_id=session.session_id)

    return rank


def rnn_ranker(model: GruRanker, table: EmbeddingTable, max_len: int = 200) -> Callable[[Session], RankedList]:
    def rank(session: Session) -> RankedList:
        t = session.target()
        if not session_items(session.prefix()):
            # nothing to read: every impression ties at -inf, keeping impression order
            return RankedList(session.session_id, list(t.impressions), [-np.inf] * len(t.impressions),
                              user_id=session.user_id)
        return predict_clickout(model, table, session, list(t.impressions), max_len)

    return rank


def fit_mf_models(sessions: Sequence[Session], cfg: PipelineConfig):
    model = train_mf(build_interactions(sessions, "hotel"), cfg.mf)
    try:
        prices = build_interactions(sessions, "price_category", cfg.price_buckets)
    except ValueError as e:
        _logger.warning("no price-category model: %s", e)
        return model, None
    return model, train_mf(prices, cfg.mf)


def fit_rnn(train_sessions: Sequence[Session], all_sessions: Sequence[Session], table: EmbeddingTable, cfg: PipelineConfig) -> GruRanker:
    item_index = build_item_index(all_sessions)
    seqs, targets = training_examples(train_sessions, table, item_index, cfg.rnn.max_len)
    batches = make_batches(seqs, targets, cfg.rnn.batch_size)
    return train_rnn(batches, item_index, epochs=cfg.rnn.epochs, lr=cfg.rnn.lr, seed=cfg.rnn.seed,
                     hidden_dim=cfg.rnn.hidden_dim, clip_norm=cfg.rnn.clip_norm)


def oof_folds(session_ids: Sequence[str], k: int) -> dict[str, int]:
    return {sid: i % k for i, sid in enumerate(sorted(session_ids))}


# --- the pipeline ------------------------------------------------------------


class Pipeline:
    def __init__(self, config: PipelineConfig):
        config.validate()
        self.cfg = config
        self.workdir = config.workdir
        os.makedirs(self.workdir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.workdir, name)

    def sessions(self, partition: str) -> list[Session]:
        return ingest.load_sessions(self.path(f"{partition}.csv"))

    def truth(self, partition: str) -> dict[str, str]:
        return ingest.read_ground_truth(self.path(f"truth_{partition}.csv"))

    def _model_stage(self, stage: str) -> str:
        # without retraining, the inner-trained base models also serve local_test
        return stage if stage == "inner" or self.cfg.retrain_base else "inner"

    def _stage_sessions(self, stage: str):
        """(training sessions, sessions visible to unsupervised fitting)."""
        train, test = STAGES[stage]
        train_s = self.sessions(train)
        visible = train_s + self.sessions(test)
        if stage == "inner":
            # masked local_test rows carry no labels; their actions are fair game
            visible += self.sessions("local_test")
        return train_s, visible

    # stages

    def split(self):
        actions = ingest.read_log(self.cfg.input, self.cfg.delimiter)
        sessions = ingest.filter_sessions(ingest.group_sessions(actions))
        bundle = ingest.make_splits(sessions, self.cfg.ratio, self.cfg.split_seed)
        for part in PARTITIONS:
            ingest.save_sessions(getattr(bundle, part), self.path(f"{part}.csv"))
        for part in ("local_test", "inner_test"):
            ids = {s.session_id for s in getattr(bundle, part)}
            ingest.write_ground_truth({k: v for k, v in bundle.ground_truth.items() if k in ids},
                                      self.path(f"truth_{part}.csv"))
        return bundle

    def embed(self) -> EmbeddingTable:
        corpus = self.sessions("local_train") + self.sessions("local_test")
        table = train_item2vec(corpus, self.cfg.embed)
        table.save(self.path("embedding.txt"))
        return table

    def train_mf(self, stage: str):
        _, visible = self._stage_sessions(stage)
        model, price_model = fit_mf_models(visible, self.cfg)
        model.save(self.path(f"mf_{stage}.txt"))
        if price_model is not None:
            price_model.save(self.path(f"price_{stage}.txt"))
        return model, price_model

    def train_rnn(self, stage: str) -> GruRanker:
        train_s, visible = self._stage_sessions(stage)
        table = EmbeddingTable.load(self.path("embedding.txt"))
        model = fit_rnn(train_s, visible, table, self.cfg)
        model.save(self.path(f"rnn_{stage}.txt"))
        return model

    def load_mf(self, stage: str):
        price_path = self.path(f"price_{stage}.txt")
        price = LatentModel.load(price_path) if os.path.exists(price_path) else None
        return LatentModel.load(self.path(f"mf_{stage}.txt")), price

    def predict(self, stage: str):
        """Base-model predictions and MF feature rows for the stage's test partition."""
        partition = STAGES[stage][1]
        model_stage = self._model_stage(stage)
        mf, price = self.load_mf(model_stage)
        rnn = GruRanker.load(self.path(f"rnn_{model_stage}.txt"))
        table = EmbeddingTable.load(self.path("embedding.txt"))
        truth = self.truth(partition) if partition == "inner_test" else {}
        _, multi = ingest.partition_cold_start(predictable(self.sessions(partition)))
        rank_mf, rank_rnn = mf_ranker(mf, price), rnn_ranker(rnn, table, self.cfg.rnn.max_len)
        mf_preds = [rank_mf(s) for s in multi]
        rnn_preds = [rank_rnn(s) for s in multi]
        rows = [r for s in multi for r in extract_features(s, mf, price, truth=truth.get(s.session_id))]
        write_predictions(mf_preds, self.path(f"pred_{partition}_mf.csv"), partition)
        write_predictions(rnn_preds, self.path(f"pred_{partition}_rnn.csv"), partition)
        write_tagged_rows(rows, FeatureRow, self.path(f"features_{partition}.csv"), partition)

    def train_stack(self):
        """Fit the MF re-ranker and the stacker, both on inner_test only."""
        part = "inner_test"
        truth = self.truth(part)
        rows = read_tagged_rows(self.path(f"features_{part}.csv"), FeatureRow, part)
        mf_preds = read_predictions(self.path(f"pred_{part}_mf.csv"), part)
        rnn_preds = read_predictions(self.path(f"pred_{part}_rnn.csv"), part)
        groups = _groups(rows)
        labelled = [sid for sid, g in groups.items() if sum(r.label for r in g) == 1]

        if self.cfg.rerank:
            reranker = train_reranker([r for sid in labelled for r in groups[sid]], self.cfg.tree)
            reranker.save(self.path("rerank.txt"))
            # stacker rows need MF scores the re-ranker has not been fit on
            folds = oof_folds(labelled, self.cfg.oof_folds)
            for k in range(self.cfg.oof_folds):
                fit = [r for sid in labelled if folds[sid] != k for r in groups[sid]]
                fold_model = train_reranker(fit, self.cfg.tree)
                for sid in labelled:
                    if folds[sid] == k:
                        mf_preds[sid] = rank_group(fold_model, groups[sid])
        impressions = {sid: [r.item_id for r in sorted(g, key=lambda r: r.impression_position)] for sid, g in groups.items()}
        keep = set(labelled)
        stack_rows = build_stack_rows({k: v for k, v in mf_preds.items() if k in keep},
                                      {k: v for k, v in rnn_preds.items() if k in keep}, truth, impressions)
        write_tagged_rows(stack_rows, StackRow, self.path("stack_rows.csv"), part)
        stacker = train_stacker(stack_rows, self.cfg.tree)
        stacker.save(self.path("stack.txt"))
        return stacker

    def ensemble(self) -> dict[str, list[RankedList]]:
        """Final local_test rankings for every mode; the configured one becomes the submission."""
        part = "local_test"
        sessions = predictable(self.sessions(part))
        mf_preds = read_predictions(self.path(f"pred_{part}_mf.csv"), part)
        rnn_preds = read_predictions(self.path(f"pred_{part}_rnn.csv"), part)
        if self.cfg.rerank:
            rows = read_tagged_rows(self.path(f"features_{part}.csv"), FeatureRow, part)
            reranker = TreeEnsemble.load(self.path("rerank.txt"))
            for sid, g in _groups(rows).items():
                mf_preds[sid] = rank_group(reranker, g)
        stacker = TreeEnsemble.load(self.path("stack.txt"))

        out = {}
        for mode in MODES:
            out[mode] = [
                route(s, mode, mf=lambda s: mf_preds[s.session_id], rnn=lambda s: rnn_preds[s.session_id], stacker=stacker)
                for s in sessions
            ]
            write_predictions(out[mode], self.path(f"final_{mode}.csv"), part)
        baseline = impression_baseline(sessions)
        write_predictions(baseline, self.path("final_baseline.csv"), part)
        write_submission(out[self.cfg.mode], self.cfg.submission_path)
        return out

    def evaluate(self) -> dict[str, EvalReport]:
        truth = self.truth("local_test")
        reports = {}
        lines = []
        for mode in MODES + ("baseline",):
            preds = read_predictions(self.path(f"final_{mode}.csv"), "local_test")
            rep = evaluate(preds.values(), truth)
            reports[mode] = rep
            rep.save(self.path(f"report_{mode}.txt"))
            lines.append(f"{mode:>9}: {rep.text()}")
        with open(self.path("report.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        return reports

    def stage_plan(self):
        plan = [("split", self.split), ("embed", self.embed)]
        for stage in ("inner", "local") if self.cfg.retrain_base else ("inner",):
            plan += [(f"train-mf:{stage}", lambda st=stage: self.train_mf(st)),
                     (f"train-rnn:{stage}", lambda st=stage: self.train_rnn(st))]
        plan += [
            ("predict:inner", lambda: self.predict("inner")),
            ("train-stack", self.train_stack),
            ("predict:local", lambda: self.predict("local")),
            ("ensemble", self.ensemble),
            ("evaluate", self.evaluate),
        ]
        return plan

    def run_all(self, resume: bool = False) -> dict[str, EvalReport]:
        """Run every stage; with ``resume`` skip stages whose completion marker exists."""
        result = None
        for name, fn in self.stage_plan():
            marker = self.path(f".done-{name.replace(':', '-')}")
            if resume and os.path.exists(marker) and name != "evaluate":
                _logger.info("stage %s: already complete, skipped", name)
                continue
            t0 = time.perf_counter()
            try:
                result = fn()
            except Exception as e:
                raise StageError(name, e) from e
            open(marker, "w").close()
            _logger.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
        return result

    def run(self, resume: bool = False) -> EvalReport:
        return self.run_all(resume)[self.cfg.mode]


def _groups(rows) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in rows:
        groups.setdefault(r.group_id, []).append(r)
    return groups


def run_pipeline(config: PipelineConfig, resume: bool = False) -> EvalReport:
    return Pipeline(config).run(resume)
