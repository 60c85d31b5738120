"""
Nonce reuse risk when many services sign under one key
=======================================================
"""

from keyreuse.integrator import collision_risk

for bits in (32, 64, 96, 128):
    row = "  ".join(f"{collision_risk(bits, k):9.2e}" for k in (10**3, 10**6, 10**9, 10**12))
    print(f"{bits:>3}-bit nonces  {row}")

# the closed form against the exact product for a small space
print(collision_risk(16, 300), collision_risk(16, 300, exact=True))
