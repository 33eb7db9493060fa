import numpy as np, time
from occusense.synth import ScenarioConfig, generate_scenario
from occusense.pipeline import PipelineConfig, build_windows, train_pipeline, evaluate_model
from occusense.dsp import default_spectrogram_config
from occusense.evaluate import baseline_mean, aggregate_paired, pearson

t0 = time.time()
scfg = ScenarioConfig(
    duration=23400,  # 6.5 h
    arrival_rate=(6, 28, 48, 32, 12, 30, 50, 34, 20, 42, 24),
    mean_dwell=780.0,
    cough_rate=2.0, footstep_rate=1.5, rustle_rate=6.0,
    speech_fraction=0.06,
    sample_rate=8000,
    mic_positions=((3.9, 2.9),),
    seed=11,
)
sc = generate_scenario(scfg)
print(f"synth {time.time()-t0:.1f}s; occ mean {sc.truth.counts.mean():.2f} max {sc.truth.counts.max()} speech-label {sc.chunk_labels.mean():.3f}", flush=True)

pcfg = PipelineConfig(spectrogram=default_spectrogram_config(8000), scheme=1, encoder="frozen",
                      epochs=30, seed=3, folds=10)
t0 = time.time()
windows = build_windows(sc, pcfg)
print(f"windows {time.time()-t0:.1f}s; n={len(windows)}", flush=True)

test_fold = 9
train_w = [w for w in windows if w.fold != test_fold]
test_w  = [w for w in windows if w.fold == test_fold]
t0 = time.time()
mdl = train_pipeline(train_w, pcfg)
dt = time.time()-t0
res_te = evaluate_model(mdl, test_w)
tr_truth = np.concatenate([w.truth for w in train_w]); te_truth = np.concatenate([w.truth for w in test_w])
base = baseline_mean(tr_truth, te_truth)
print(f"train {dt:.0f}s; loss_end {mdl.loss_history[-1]:.3f}", flush=True)
print(f"held-out rho {res_te.metrics.rho:.3f} MAE {res_te.metrics.mae:.3f} RMSE {res_te.metrics.rmse:.3f}")
print(f"baseline MAE {base.mae:.3f}; improvement {(1-res_te.metrics.mae/base.mae)*100:.1f}%")
print(f"test std {te_truth.std():.2f} range {te_truth.min()}-{te_truth.max()} n={len(test_w)}", flush=True)

res_all = evaluate_model(mdl, windows)
for w_s in (1800, 3600, 7200):
    p, t = aggregate_paired(res_all.pred, res_all.truth, res_all.valid, w_s)
    print(f"agg {w_s}s: rho {pearson(p, t):.4f} (n={p.size})", flush=True)
