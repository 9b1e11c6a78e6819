"""Quick end-to-end check of the stambridge_py extension."""

import math
import os
import tempfile

import stambridge_py as sb

TINY = [
    ("epochs", "2"), ("batch_size", "4"), ("blocks", "1"), ("d_model", "8"),
    ("heads", "2"), ("ffn", "16"), ("patch_maps", "2"), ("patch_kernel", "5"),
    ("patch_pool", "2"), ("embed_dim", "16"),
]


def main():
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        ckpt = os.path.join(tmp, "ck")
        n = sb.synth(data, classes=3, test_classes=3, trials=2, subjects=2,
                     channels=8, time=32, dim=16, seed=2)
        ds = sb.Dataset(data)
        assert len(ds) == n == 12, n
        assert ds.trial_shape == (8, 32)
        assert len(ds.split("train")) + len(ds.split("test")) == n
        assert len(ds.trial(0)) == 8

        cid, losses = sb.train(data, ckpt, overrides=TINY)
        assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
        ck = sb.Checkpoint(ckpt)
        assert ck.checkpoint_id == cid
        z = ck.embed(ds, ds.split("test")[:3])
        assert all(abs(sum(x * x for x in row) - 1.0) < 1e-9 for row in z)
        r1 = ck.evaluate(ds, k_way=3, seed=1)
        r2 = ck.evaluate(ds, k_way=3, seed=1)
        assert r1 == r2 and r1["n_queries"] == 6, r1
        try:
            ck.evaluate(ds, k_way=4)
            raise AssertionError("k_way above the class count was accepted")
        except ValueError:
            pass

        loss = sb.info_nce([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], 1.0)
        assert abs(loss - math.log(1.0 + math.exp(-1.0))) < 1e-12

        hard, soft, total = sb.ringing()
        assert soft == 0.0 and hard > 1e-3 * total

        path = os.path.join(tmp, "t.eegt")
        sb.write_tensor(path, [2, 3], [1, 2, 3, 4, 5, 6.5], "f32")
        assert sb.read_tensor(path) == ([2, 3], [1, 2, 3, 4, 5, 6.5], "f32")

    print(f"stambridge_py {sb.__version__}: smoke test ok "
          f"(top1={r1['top1']:.3f}, top5={r1['top5']:.3f})")


if __name__ == "__main__":
    main()
