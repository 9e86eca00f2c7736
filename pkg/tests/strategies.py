"""Hypothesis strategies for token payloads."""

from hypothesis import strategies as st

from rapgate.tokens import ACTIONS, CREDENTIAL_FIELDS, RapIdBinding, TokenPayload

idents = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FFF, blacklist_categories=("Cs",)), min_size=1, max_size=20)
resource_ids = st.from_regex(r"[A-Za-z0-9][A-Za-z0-9_.-]{0,11}", fullmatch=True)
times = st.integers(min_value=1_600_000_000, max_value=1_900_000_000)


@st.composite
def payloads(draw, jti=None):
    jti = jti or draw(st.from_regex(r"[0-9a-f]{8,32}", fullmatch=True))
    rids = draw(st.lists(resource_ids, max_size=4, unique=True))
    bindings = tuple(
        RapIdBinding(
            resource_id=r,
            rap_iat=draw(times),
            rap_Tno=draw(st.integers(0, 10_000)),
            rap_V=draw(st.booleans()),
            rap_reqC=tuple(draw(st.sets(st.sampled_from(sorted(CREDENTIAL_FIELDS))))),
            rap_jti=jti,
        )
        for r in rids
    )
    gar = {r: tuple(draw(st.sets(st.sampled_from(ACTIONS)))) for r in rids if draw(st.booleans())}
    iat = draw(times)
    exp = iat + draw(st.integers(1, 86_400))
    nbf = draw(st.none() | st.integers(iat - 100, exp - 1))
    return TokenPayload(
        iss=draw(idents), sub=draw(idents), aud=draw(idents), exp=exp, iat=iat, jti=jti,
        rapID=bindings, gar=gar, nbf=nbf,
    )
