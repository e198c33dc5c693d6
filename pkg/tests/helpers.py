import numpy as np

from mtpar.data import AtomisticSample


def random_sample(rng, n_atoms, dataset_id=0, box=3.0, n_species=20):
    pos = rng.uniform(0, box, size=(n_atoms, 3))
    return AtomisticSample(
        rng.integers(0, n_species, size=n_atoms).astype(np.uint8),
        pos,
        float(rng.normal()),
        rng.normal(size=(n_atoms, 3)),
        dataset_id,
    )


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def transformed(sample, R=None, t=None, perm=None):
    pos, forces, z = sample.positions, sample.forces, sample.species
    if perm is not None:
        pos, forces, z = pos[perm], forces[perm], z[perm]
    if R is not None:
        pos = pos @ R.T
    if t is not None:
        pos = pos + t
    return AtomisticSample(z.copy(), pos.copy(), sample.energy_per_atom, forces.copy(), sample.dataset_id)


def fd_gradient(loss_fn, part, h=1e-6):
    blocks = [part.shared] + [part.heads[k] for k in sorted(part.heads)]
    out = []
    for blk in blocks:
        g = np.zeros_like(blk)
        for j in range(blk.size):
            old = blk[j]
            blk[j] = old + h
            lp = loss_fn()
            blk[j] = old - h
            lm = loss_fn()
            blk[j] = old
            g[j] = (lp - lm) / (2 * h)
        out.append(g)
    return np.concatenate(out)
