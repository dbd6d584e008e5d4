"""SCL with per-step refresh (no staleness)."""
import numpy as np
from sclrf.scene import default_scene, generate_scene
from sclrf import trainer as tr, checkpoint, cache as ch
from sclrf.trainer import TrainConfig
from sclrf.codec import CodecConfig

scene = generate_scene(default_scene())
cfg = TrainConfig(codec=CodecConfig(backend="jpeg", quality=20), seed=0,
                  finetune_steps=300, cache_interval=1)
fld = checkpoint.load_field(".calib/pre_2000.npz")
state = tr.TrainState.fresh(fld)
bank = tr.RayBank.from_scene(scene)
for step in range(301):
    if step % 50 == 0:
        final = ch.refresh(ch.CacheState(), fld.planes, fld.grid, cfg.pipeline(), 0)
        dq = tr.evaluate_decoded(final.decoded, fld.mlp, scene)
        rq = tr.evaluate_raw(fld, scene)
        print(f"step {step:4d}: decoded {dq:.3f} dB raw {rq:.3f} dB bits {final.bits} |P| {np.linalg.norm(fld.planes.p_xy.data):.1f}", flush=True)
    if step == 300: break
    batch = bank.batch(tr._step_rng(0, step, salt=3), cfg.rays_per_batch, scene.spec.samples_per_ray)
    tr.scl_step(state, cfg, batch, step)
