"""Compare taped gradients with central differences on a tiny model in every attention mode."""
import numpy as np

from plangen.compute import grad_check
from plangen.model import ModelConfig, Seq2SeqModel, forward_nll, total_loss
from plangen.planner import GumbelNoise, PlannerConfig

for mode in ("baseline", "pag", "rpag"):
    pc = PlannerConfig(k=3, mode=mode, summary_dim=3, align_hidden=6, max_src_len=4)
    m = Seq2SeqModel(ModelConfig(6, 6, embed_dim=4, enc_hidden=4, dec_hidden=6, out_hidden=6, seed=1, planner=pc))
    rng = np.random.default_rng(2)
    for p in m.parameters().values():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)

    # relaxed gate and frozen noise make the loss a smooth deterministic function
    def loss():
        res = forward_nll(m, (3, 4, 5), (5, 4, 3, 2), GumbelNoise.seeded(3), straight_through_gate=False)
        return total_loss(res.loss, res.commitments, 0.05, 3)

    rep = grad_check(loss, m.parameters())
    name, err = rep.worst
    print(f"{mode:8s} params={len(rep.errors):2d} worst={name} rel_err={err:.2e} passed={rep.passed}")
