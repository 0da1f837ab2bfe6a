"""Full command-line workflow on generated bundles in a scratch directory.

Writes feature bundles and ground truth, runs segment / calibrate /
eval / colorize through the same entry point the installed `ease`
script uses, and leaves the artifacts under ./scratch for inspection.
"""

from pathlib import Path

from ease import cli
from ease.hmerge import read_hierarchy
from ease.synth import SynthSpec, gen_blob_scene
from ease.tensors import write_bundle, write_tensor

scratch = Path("scratch")
feat = scratch / "features"
gt_dir = scratch / "gt"
out = scratch / "hierarchies"
for seed in range(3):
    spec = SynthSpec(seed=seed, regions=3 + seed, noise=0.1, margin=0.35,
                     hr_shape=(32, 32), lr_shape=(4, 4))
    f_lr, f_hr, attention, gt = gen_blob_scene(spec)
    name = f"scene_{seed:02d}"
    write_bundle(feat / name, {"f_lr": f_lr.data, "f_hr": f_hr.data, "attention": attention.rows})
    gt_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(gt_dir / f"{name}.tns", gt)

cfg = scratch / "config.txt"
cfg.write_text("min_segment=10\ndelta=0.005\n")

print("== segment ==")
assert cli.main(["segment", "--config", str(cfg), "--features", str(feat), "--out", str(out)]) == 0

print("\n== calibrate ==")
assert cli.main([
    "calibrate", "--config", str(cfg),
    "--gt", str(gt_dir), "--features", str(feat), "--out", str(scratch),
]) == 0

# export each scene's best level as the prediction to score
pred = scratch / "pred"
pred.mkdir(parents=True, exist_ok=True)
for scene_dir in sorted(out.iterdir()):
    levels = read_hierarchy(scene_dir)
    write_tensor(pred / f"{scene_dir.name}.tns", levels[0].labels)

print("\n== eval ==")
assert cli.main(["eval", "--pred", str(pred), "--gt", str(gt_dir)]) == 0

print("\n== colorize ==")
first = sorted(pred.glob("*.tns"))[0]
assert cli.main(["colorize", "--in", str(first), "--out", str(scratch / "preview.ppm"), "--seed", "1"]) == 0
print(f"wrote {scratch / 'preview.ppm'}")
