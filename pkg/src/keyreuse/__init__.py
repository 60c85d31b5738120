"""Simulation and forensic analysis of public-key reuse in Kademlia discovery networks."""
from .identity import NodeId, NodeRecord, PublicKey, generate_keypair, node_id
from .dht import InsertOutcome, RoutingTable
from .crawler import crawl_v4, crawl_v5, expected_distinct, summarize
from .handshaker import ServiceIdentity, ServiceTuple, sweep, service_census
from .integrator import build_graph, collision_risk, detect_reuse, user_stats, weakly_connected_components
from .simnet import SimConfig, NodeSpec, SharedKey, run, scenario_exp1, scenario_exp2

__version__ = "0.1.0"
