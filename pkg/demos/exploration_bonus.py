"""How the shared inverse covariance shrinks the exploration bonus.

Each chosen action's feature vector g is folded into A^-1 with a rank-1
Sherman-Morrison step. Repeating a direction makes its bonus decay like
1/sqrt(1 + n); directions never seen keep their prior bonus.
"""
import numpy as np

from ucbroute import UcbState, rank1_update, ucb_score

state = UcbState.initial(dim=4, beta=1.0, lambda0=1.0)
seen = np.array([1.0, 0.0, 0.0, 0.0])
unseen = np.array([0.0, 1.0, 0.0, 0.0])

print(" n   bonus(seen)  1/sqrt(1+n)  bonus(unseen)")
for n in range(6):
    b_seen = ucb_score(0.0, seen, state)[1]
    b_unseen = ucb_score(0.0, unseen, state)[1]
    print(f"{n:>2} {b_seen:>12.6f} {1 / np.sqrt(1 + n):>12.6f} {b_unseen:>14.6f}")
    rank1_update(state, seen)

# %% the incremental inverse matches a direct one
rng = np.random.default_rng(0)
state = UcbState.initial(dim=16)
A = np.eye(16)
for _ in range(100):
    g = rng.normal(size=16)
    rank1_update(state, g)
    A += np.outer(g, g)
print("\nmax |A_inv - inv(A)| after 100 updates:", np.abs(state.A_inv - np.linalg.inv(A)).max())
