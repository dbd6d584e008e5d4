"""SCL vs budget-matched CA at JPEG q20 and identity, fixed trainer."""
import time, numpy as np
from sclrf.scene import default_scene, generate_scene
from sclrf import trainer as tr, checkpoint
from sclrf.trainer import TrainConfig
from sclrf.codec import CodecConfig

scene = generate_scene(default_scene())
for backend, q in (("jpeg", 20), ("identity", 50), ("jpeg", 35), ("jpeg", 65)):
    cfg = TrainConfig(codec=CodecConfig(backend=backend, quality=q), seed=0, finetune_steps=300)
    t0 = time.time()
    ca = tr.finetune_ca(checkpoint.load_field(".calib/pre_2000.npz"), scene, cfg)
    t_ca = time.time() - t0
    t0 = time.time()
    scl = tr.finetune_scl(checkpoint.load_field(".calib/pre_2000.npz"), scene, cfg)
    t_scl = time.time() - t0
    nrefresh = sum(1 for r in scl.diagnostics if r.refreshed)
    print(f"{backend} q{q}: CA {ca.psnr_decoded:.3f} dB/{ca.bits_total}b ({t_ca:.0f}s) ; "
          f"SCL {scl.psnr_decoded:.3f} dB/{scl.bits_total}b ({t_scl:.0f}s, {nrefresh} refreshes) ; "
          f"delta {scl.psnr_decoded - ca.psnr_decoded:+.3f} dB", flush=True)
