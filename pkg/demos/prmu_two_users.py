"""Train the preference model on two users with opposite tastes."""

from tagpr.prmu import PrmuModel, PrmuTrainConfig, opposite_users_pairs, pairwise_accuracy, score, train_prmu

train, held = opposite_users_pairs(500, seed=0), opposite_users_pairs(500, seed=1)
print(f"untrained held-out accuracy: {pairwise_accuracy(PrmuModel(), held):.3f}")
model, losses = train_prmu(PrmuModel(), train, PrmuTrainConfig(lr=10.0, epochs=20))
print(f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")
print(f"trained held-out accuracy:   {pairwise_accuracy(model, held):.3f}")

a_pref, a_rej = held[0].inputs()
print(f"\nshared pair, candidate A = {a_pref.answer!r}, candidate B = {a_rej.answer!r}")
for user in ("user_a", "user_b"):
    sa = score(model, a_pref.__class__(user, a_pref.query, (), a_pref.chain, a_pref.answer))
    sb = score(model, a_rej.__class__(user, a_rej.query, (), a_rej.chain, a_rej.answer))
    print(f"{user}: score(A) - score(B) = {sa - sb:+.3f}")
