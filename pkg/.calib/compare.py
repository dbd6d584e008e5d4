"""SCL vs CA at JPEG q20 + identity from the 2000-step pretrain."""
import time, numpy as np
from sclrf.scene import default_scene, generate_scene
from sclrf import trainer as tr, checkpoint
from sclrf.trainer import TrainConfig
from sclrf.codec import CodecConfig

scene = generate_scene(default_scene())
for backend, q in (("jpeg", 20), ("identity", 50)):
    fld_ca = checkpoint.load_field(".calib/pre_2000.npz")
    cfg = TrainConfig(codec=CodecConfig(backend=backend, quality=q), seed=0, finetune_steps=300)
    t0 = time.time()
    ca = tr.compress_once(fld_ca, scene, cfg)
    fld_scl = checkpoint.load_field(".calib/pre_2000.npz")
    scl = tr.finetune_scl(fld_scl, scene, cfg)
    print(f"{backend} q{q}: CA {ca.psnr_decoded:.3f} dB / {ca.bits_total}b ; "
          f"SCL {scl.psnr_decoded:.3f} dB / {scl.bits_total}b ; "
          f"delta {scl.psnr_decoded - ca.psnr_decoded:+.3f} dB ({time.time()-t0:.0f}s)", flush=True)
