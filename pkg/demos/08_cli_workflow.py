"""The full command-line workflow: generate -> train -> eval -> report.

Uses the same entry point as the installed `robustsplat` command. Everything
lands under demos/out/cli/. The eval step re-derives the final metrics from
the checkpoint alone and verifies they match the training log byte for byte.
"""

import os
import shutil

from robustsplat.cli import main

ROOT = os.path.join(os.path.dirname(__file__), "out", "cli")
shutil.rmtree(ROOT, ignore_errors=True)
os.makedirs(ROOT)

data = os.path.join(ROOT, "dataset")
small = ["--scene.width", "48", "--scene.height", "48", "--scene.views", "12",
         "--scene.persistence", "4"]
fast = ["--train.steps", "400", "--train.eval_every", "200",
        "--train.splats", "200", "--glo.enabled", "false"]

print("$ robustsplat generate")
assert main(["generate", "--out", data, "--scene.preset", "easy", *small]) == 0

runs = []
for mode in ("none", "trim", "robust_filter"):
    out = os.path.join(ROOT, f"run_{mode}")
    runs.append(out)
    print(f"\n$ robustsplat train --mask.mode {mode}")
    code = main(["train", "--data", data, "--out", out, *fast,
                 "--mask.mode", mode, "--mask.beta1", "0.01"])
    assert code == 0

print("\n$ robustsplat eval  (recompute metrics from the checkpoint)")
assert main(["eval", "--run", runs[-1]]) == 0

print("\n$ robustsplat report")
assert main(["report", *runs, "--csv", os.path.join(ROOT, "report.csv")]) == 0
print(f"\nartifacts under {ROOT}/")
