"""Score a few hand-written responses with every reward signal."""

from tagpr.rewards import RewardContext, score_response

ctx = RewardContext()
chain = ("<analyze_input> query asks for a label </analyze_input>"
         "<examine_examples> user picked label_2 six times </examine_examples>"
         "<make_decision> label_2 </make_decision>")
responses = {
    "well formed, correct": f"<think>{chain}</think> label_2",
    "well formed, wrong": f"<think>{chain}</think> label_0",
    "untagged reasoning": "<think>the user likes label_2</think> label_2",
    "no think block": "label_2",
    "repetitive": "<think>" + chain + " label_2 label_2 label_2 label_2 label_2 label_2</think> label_2",
}
print(f"{'response':24s} {'r_v':>5s} {'r_f':>5s} {'r_rep':>7s} {'r_tag':>6s} {'composite':>9s} {'foundation':>10s}")
for name, raw in responses.items():
    bd = score_response(ctx, raw, "classification", "label_2")
    print(f"{name:24s} {bd.r_v:5.2f} {bd.r_f:5.2f} {bd.r_rep:7.3f} {bd.r_tag:6.1f} {bd.composite:9.3f} "
          f"{bd.foundation:10.3f}")
