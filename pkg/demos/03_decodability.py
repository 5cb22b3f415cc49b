"""
How much of each input survives in the embedding?
=================================================

Features of the synthetic task differ in how much the label depends on them.
After training, a small probe network tries to recover each raw feature from
the frozen last hidden layer.  A high probe RMSE means the model discarded
that feature.  This is a one-dataset, reduced-size version of what
`tabpretrain probe` runs over many datasets.
"""

from tabpretrain import PipelineConfig, synth

spec = synth.SyntheticSpec(n=3000)
probe = synth.ProbeConfig(hidden=128, epochs=15)
base = {"model": {"layers": 2, "layer_size": 128},
        "train": {"max_pretrain_iters": 400, "eval_every": 200, "pretrain_stop": "by_pretrain_val_loss",
                  "max_finetune_epochs": 20, "patience": 5}}


def config_for(kind):
    return PipelineConfig.from_dict({**base, "objective": None if kind == "scratch" else {"kind": kind}})


rows = synth.decodability_study(spec, [0], config_for, probe)

print("importance rank ->", " ".join(f"{r:>6d}" for r in range(spec.m)))
for kind in synth.INIT_KINDS:
    by_rank = sorted((r.importance_rank, r.rmse) for r in rows if r.init_kind == kind)
    print(f"{kind:<15}", " ".join(f"{v:6.3f}" for _, v in by_rank))

for half in ("top", "bottom"):
    means = {k: synth.group_means(rows, k, half, spec.m)[0] for k in synth.INIT_KINDS}
    print(f"{half:>6} half mean RMSE:", {k: round(v, 4) for k, v in means.items()})
