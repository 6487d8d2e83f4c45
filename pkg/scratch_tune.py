import time
import numpy as np
from ruladapt.perf import keep_malloc_heap
keep_malloc_heap()
from ruladapt import dann, baselines
from ruladapt.data import (DomainDataset, EngineRun, SyntheticConfig, SyntheticShift,
                           gen_synthetic, label_rul, fit_transform_minmax)

R_E = 125.0


def prepare(ds, labeled=True):
    runs = [label_rul(r, R_E) for r in ds.runs]
    runs_n, scaler = fit_transform_minmax(runs, include_rul=True, rul_max=R_E)
    if not labeled:
        runs_n = [EngineRun(r.unit_id, r.features, None) for r in runs_n]
    return DomainDataset(ds.name, runs_n, scaler)


def make_data(shift, seed, noise, n_train=40, n_eval=16):
    cfg = SyntheticConfig(n_units=n_train + n_eval, t_range=(140, 160), q=12, knee=R_E,
                          noise=noise, shift=shift)
    src_raw, tgt_raw = gen_synthetic(cfg, seed)
    src = prepare(DomainDataset(src_raw.name, src_raw.runs[:n_train]))
    tgt_train = prepare(DomainDataset(tgt_raw.name, tgt_raw.runs[:n_train]), labeled=False)
    eval_runs = [label_rul(r, R_E) for r in tgt_raw.runs[n_train:]]
    tgt_eval = DomainDataset("tgt-eval",
                             tgt_train.scaler.transform_runs(eval_runs, include_rul=True),
                             tgt_train.scaler)
    return src, tgt_train, tgt_eval


def trial(shift, seed, hp, spec, noise=0.05, run_base=True):
    src, tgt_train, tgt_eval = make_data(shift, seed, noise)
    t0 = time.perf_counter()
    model, report = dann.fit(src, tgt_train, hp, seed)
    t_dann = time.perf_counter() - t0
    m_dann = dann.evaluate(model, tgt_eval, at="all_windows")
    out = dict(dann_rmse=m_dann["rmse"], dom_acc=report.epochs[-1].dom_acc,
               stop=report.stop_epoch, best=report.best_epoch,
               best_val=report.best_val_rmse, t_dann=round(t_dann, 1))
    if run_base:
        t0 = time.perf_counter()
        bmodel, _ = baselines.train_single_domain(src, spec, seed)
        out["t_base"] = round(time.perf_counter() - t0, 1)
        out["src_rmse"] = dann.evaluate(bmodel, tgt_eval, at="all_windows")["rmse"]
    return out


def show(tag, res):
    print(tag, {k: (round(v, 2) if isinstance(v, float) else v) for k, v in res.items()})


T_W = 12
NOISE = 0.1
base_hp = dict(lstm_layers=[16], lstm_dropout=0.0, f_units=16, reg_layers=[16], reg_dropout=0.0,
               dom_layers=[16], dom_dropout=0.1, alpha=0.8, batch_size=512, lr_reg=0.002,
               lr_dom=0.001, optimizer="rmsprop", l2=0.0001, t_w=T_W, p=2,
               max_epochs=120, patience=120)
spec = baselines.BaselineSpec(lstm_layers=[16], lstm_dropout=0.0, dense_layers=[16],
                              dense_dropouts=[0.0], epochs=60, lr=0.001, batch_size=512, t_w=T_W)

shift = SyntheticShift(feature_scale=0.0)
hp = dann.DannHyperParams(**base_hp)

for seed in (23,):
    show(f"noshift s{seed}", trial(SyntheticShift(), seed, hp, spec, noise=NOISE))
for seed in (23,):
    show(f"shift   s{seed}", trial(shift, seed, hp, spec, noise=NOISE))
