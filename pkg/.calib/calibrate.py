"""Calibration: pretrain convergence + SCL vs CA at JPEG q20 and identity."""
import json, time
import numpy as np
from sclrf.scene import default_scene, generate_scene
from sclrf.field import FieldDims, init_field
from sclrf import trainer as tr
from sclrf.trainer import TrainConfig
from sclrf.codec import CodecConfig
from sclrf import checkpoint

t_start = time.time()
scene = generate_scene(default_scene())
print(f"scene: {time.time()-t_start:.1f}s", flush=True)

fld = init_field(FieldDims(), seed=0)
cfg = TrainConfig(codec=CodecConfig(backend="identity"), seed=0, pretrain_steps=2000)
bank = tr.RayBank.from_scene(scene)
state = tr.TrainState.fresh(fld)
traj = []
t0 = time.time()
for step in range(2000):
    batch = bank.batch(tr._step_rng(0, step, 1), cfg.rays_per_batch, scene.spec.samples_per_ray)
    loss, rec = tr.vanilla_step(state, cfg, batch, step)
    if (step+1) % 200 == 0:
        tp = tr.evaluate_raw(fld, scene, holdout=False)
        hp = tr.evaluate_raw(fld, scene, holdout=True)
        traj.append((step+1, loss, tp, hp))
        print(f"step {step+1}: loss={loss:.5f} trainPSNR={tp:.2f} holdPSNR={hp:.2f} ({time.time()-t0:.0f}s)", flush=True)
        checkpoint.save_field(f".calib/pre_{step+1}.npz", fld)

json.dump(traj, open(".calib/traj.json","w"))
print(f"total pretrain: {time.time()-t0:.0f}s", flush=True)
