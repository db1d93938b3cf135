"""
Peer-collaborative training on a three-armed spiral
====================================================

A shortened version of the bundled ``spiral_pcl`` preset next to its
single-branch baseline. Shortened runs are for illustration; the acceptance
suite uses the full 100-epoch presets.
"""

from pclkd.config import load_config, preset_path
from pclkd.train import evaluate, load_datasets, train

short = {"optim.epochs": "30", "optim.milestones": "15, 23", "pcl.alpha": "8", "run.eval_train": "false"}

pcl_cfg = load_config(preset_path("spiral_pcl"), short)
base_cfg = load_config(preset_path("spiral_baseline"), short)

pcl = train(pcl_cfg, write=False)
base = train(base_cfg, write=False)

# Per-epoch records carry every loss term and error; a few columns suffice here.
print("epoch  omega   L_total  branch_var  target_err  ensemble_err")
for r in pcl.records[::5]:
    print(f"{r['epoch']:5d}  {r['omega']:.3f}  {r['loss_total']:7.4f}  {r['branch_variance']:10.4f}"
          f"  {r['test_err_target']:10.2f}  {r['test_err_ensemble']:12.2f}")

# The deployable target is the temporal mean of peer 1; the ensemble uses all heads.
_, test = load_datasets(pcl_cfg)
print("PCL target   ", evaluate(pcl.bank, test, "target"))
print("PCL ensemble ", evaluate(pcl.bank, test, "ensemble"))
print("baseline     ", evaluate(base.model, test, "target"))

# Only trunk plus one head ships, which is exactly the baseline's size.
counts = pcl.model.component_param_counts()
print("training-time components", dict(counts))
print("deployed target params", counts["trunk"] + counts["head1"],
      "baseline params", sum(base.model.component_param_counts().values()))
