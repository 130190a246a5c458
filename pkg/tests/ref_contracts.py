"""Straight-line model of the contract rules, written without the package.

State is a plain triple of dicts (balances, bets, feeds); bets map an id to
(bettor, stake, status) with status "placed", "won" or "lost".  Returns the new
triple and an outcome string, or the old triple on any failure.
"""

HOUSE = "house"


def _bal(balances, who):
    return balances.get(who, 0)


def _set(balances, who, amount):
    if amount:
        balances[who] = amount
    else:
        balances.pop(who, None)


def place_bet(state, bettor, stake, bet_id):
    balances, bets, feeds = state
    if stake <= 0 or bettor == HOUSE or bet_id in bets:
        return state, "logic"
    if _bal(balances, bettor) < stake or _bal(balances, HOUSE) < stake:
        return state, "logic"
    b = dict(balances)
    _set(b, bettor, _bal(b, bettor) - stake)
    _set(b, HOUSE, _bal(b, HOUSE) - stake)
    n = dict(bets)
    n[bet_id] = (bettor, stake, "placed")
    return (b, n, dict(feeds)), "applied"


def settle_bet(state, bet_id, rng):
    balances, bets, feeds = state
    if rng is None:
        return state, "no_response"
    if bet_id not in bets or bets[bet_id][2] != "placed" or len(rng) == 0:
        return state, "logic"
    bettor, stake, _ = bets[bet_id]
    winner = bettor if rng[0] % 2 == 0 else HOUSE
    b = dict(balances)
    b[winner] = _bal(b, winner) + 2 * stake
    n = dict(bets)
    n[bet_id] = (bettor, stake, "won" if winner == bettor else "lost")
    return (b, n, dict(feeds)), "applied"


def price_transfer(state, initiator, sender, recipient, feed, value):
    balances, bets, feeds = state
    if value is None:
        return state, "no_response"
    if initiator != sender:
        return state, "logic"
    amount = int.from_bytes(value, "big")
    if amount > _bal(balances, sender):
        amount = _bal(balances, sender)
    b = dict(balances)
    _set(b, sender, _bal(b, sender) - amount)
    if amount:
        b[recipient] = _bal(b, recipient) + amount
    f = dict(feeds)
    f[feed] = value
    return (b, dict(bets), f), "applied"
