"""All desk-scale studies written to ``demo_results/``; about one minute."""

from poropbdw.pipeline import (export_report, preset, run_classification, run_mismatch_study, run_noise_study,
                               run_slice_study, run_training, run_validation)

cfg = preset("desk", out="demo_results")
tr = run_training(cfg, cfg.out)
arts = {
    "training": tr,
    "validation": run_validation(cfg, tr),
    "noise": run_noise_study(cfg, tr),
    "slices": run_slice_study(cfg, tr),
    "mismatch": run_mismatch_study(cfg, tr),
    "classification": run_classification(cfg, tr),
}
summary = export_report(arts, cfg.out, cfg)

v = summary["validation"]
print(f"validation: e_up^T={v['e_up_T']:.3f} e_u^T={v['e_u_T']:.3f} e_p^T={v['e_p_T']:.3f} over {v['cases']} cases")
for r in arts["slices"]:
    print(f"{r['config']:>8}: m={r['m']:4d} e_u^T={r['e_u']:.3f} e_p^T={r['e_p']:.3f}")
print("noise study optimum n per xi:", summary["noise"]["optimal_n"])
for xi, c in summary["classification"].items():
    print(f"classification xi={xi}: {c['correct']}/{c['total']} correct")
