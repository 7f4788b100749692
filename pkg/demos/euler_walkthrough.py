"""Generate one Eulerian graph, walk it with Hierholzer, and show the token sequences."""
import numpy as np

from plangen.tasks import euler_vocab, gen_eulerian_graph, hierholzer, is_eulerian_circuit, serialize_instance

rng = np.random.default_rng(7)
g = gen_eulerian_graph(6, rng)
print("edges:", sorted(g.edges))
print("degrees:", g.degrees())
walk = hierholzer(g, 1)
print("circuit from node 1:", walk, "valid:", is_eulerian_circuit(g, walk, 1))

v = euler_vocab(6)
inst = serialize_instance(g, walk, v)
print("source:", " ".join(v.decode(inst.source)))
print("target:", " ".join(v.decode(inst.target)))
