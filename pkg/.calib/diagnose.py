"""Why is SCL-JPEG worse? Track decoded PSNR during finetune."""
import numpy as np
from sclrf.scene import default_scene, generate_scene
from sclrf import trainer as tr, checkpoint, cache as ch
from sclrf.trainer import TrainConfig
from sclrf.codec import CodecConfig

scene = generate_scene(default_scene())
cfg = TrainConfig(codec=CodecConfig(backend="jpeg", quality=20), seed=0, finetune_steps=300)

fld = checkpoint.load_field(".calib/pre_2000.npz")
state = tr.TrainState.fresh(fld)
bank = tr.RayBank.from_scene(scene)
print("step | mse      | refreshes | decodedPSNR | rawPSNR | gradL2 | |P|")
nref = 0
for step in range(301):
    if step % 50 == 0:
        final = ch.refresh(ch.CacheState(), fld.planes, fld.grid, cfg.pipeline(), 0)
        dq = tr.evaluate_decoded(final.decoded, fld.mlp, scene)
        rq = tr.evaluate_raw(fld, scene)
        pn = np.linalg.norm(fld.planes.p_xy.data)
        print(f"{step:4d} | {state.cache.bits if not state.cache.empty else 0:8d}b | {nref:3d} | {dq:.3f} | {rq:.3f} | - | {pn:.2f}", flush=True)
    if step == 300: break
    batch = bank.batch(tr._step_rng(0, step, salt=3), cfg.rays_per_batch, scene.spec.samples_per_ray)
    loss, rec = tr.scl_step(state, cfg, batch, step)
    if rec.refreshed: nref += 1
