"""
Training to convergence on a synthetic corpus
=============================================

Five geometric motifs stand in for the five classes.  The reduced network
trains with momentum SGD (lr 0.001, momentum 0.9), stops when validation loss
has not improved for three epochs, restores its best weights and scores the
held-out split.
"""

import tempfile
from pathlib import Path

from reschest import model as M
from reschest.checkpoint import load_checkpoint
from reschest.data import SplitSpec, split_dataset
from reschest.metrics import render_report
from reschest.synthetic import make_corpus
from reschest.train import TrainConfig, fit, read_log

out = Path(tempfile.mkdtemp())
corpus = make_corpus(20, size=64, seed=7)
spec = SplitSpec()
cfg = TrainConfig(
    max_epochs=200,
    model=M.ModelConfig.reduced(),
    split=spec,
    image_size=64,
    checkpoint_path=str(out / "best.rcnc"),
    log_path=str(out / "log.jsonl"),
)
result = fit(cfg, split_dataset(corpus, spec))

for rec in read_log(cfg.log_path)[-5:]:
    print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}  val {rec.val_loss:.4f}  acc {rec.val_accuracy:.2f}")
print("best epoch", result.best_epoch, "of", len(result.history))
print(render_report(result.report))

ck = load_checkpoint(cfg.checkpoint_path)
print("checkpoint holds epoch", ck.best_epoch["epoch"], "with", len(ck.state), "tensors")
