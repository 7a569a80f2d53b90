#pragma once

#include <algorithm>
#include <deque>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "stagepipe/common.hpp"

namespace stagepipe {

inline constexpr int kPipelineSchemaVersion = 1;

// Declarative description of one stage processor, as it appears in the
// pipeline configuration file.
struct ProcessorConfig {
  std::string id;
  std::string operator_kind;
  size_t batch_size = 1;
  size_t parallelism = 1;
  size_t channel_capacity = 64;
  Json settings = Json::object();
};

struct PipelineConfig {
  int schema_version = kPipelineSchemaVersion;
  std::vector<ProcessorConfig> processors;
  std::vector<std::pair<std::string, std::string>> edges;
  std::map<std::string, std::string> tenants;  // tenant id -> branch entry processor

  static PipelineConfig from_json(const Json& j) {
    PipelineConfig cfg;
    if (!j.is_object()) raise(Errc::InvalidConfig, "pipeline config must be a JSON object");
    cfg.schema_version = j.value("schema_version", kPipelineSchemaVersion);
    if (cfg.schema_version != kPipelineSchemaVersion)
      raise(Errc::InvalidConfig,
            "unsupported schema_version " + std::to_string(cfg.schema_version));
    for (const auto& p : j.value("processors", Json::array())) {
      ProcessorConfig pc;
      pc.id = p.at("id").get<std::string>();
      pc.operator_kind = p.at("operator").get<std::string>();
      pc.batch_size = p.value("batch_size", 1u);
      pc.parallelism = p.value("parallelism", 1u);
      pc.channel_capacity = p.value("channel_capacity", 64u);
      pc.settings = p.value("settings", Json::object());
      cfg.processors.push_back(std::move(pc));
    }
    for (const auto& e : j.value("edges", Json::array())) {
      cfg.edges.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    }
    if (j.contains("tenants")) {
      for (auto it = j["tenants"].begin(); it != j["tenants"].end(); ++it)
        cfg.tenants[it.key()] = it.value().get<std::string>();
    }
    return cfg;
  }

  static PipelineConfig parse(const std::string& text) {
    Json j;
    try {
      j = Json::parse(text);
    } catch (const std::exception& e) {
      raise(Errc::InvalidConfig, std::string("pipeline config parse: ") + e.what());
    }
    return from_json(j);
  }

  Json to_json() const {
    Json j;
    j["schema_version"] = schema_version;
    j["processors"] = Json::array();
    for (const auto& p : processors) {
      Json jp{{"id", p.id},
              {"operator", p.operator_kind},
              {"batch_size", p.batch_size},
              {"parallelism", p.parallelism},
              {"channel_capacity", p.channel_capacity}};
      if (!p.settings.empty()) jp["settings"] = p.settings;
      j["processors"].push_back(std::move(jp));
    }
    j["edges"] = Json::array();
    for (const auto& [a, b] : edges) j["edges"].push_back(Json::array({a, b}));
    if (!tenants.empty()) j["tenants"] = tenants;
    return j;
  }

  ProcessorConfig* find(const std::string& id) {
    for (auto& p : processors)
      if (p.id == id) return &p;
    return nullptr;
  }
};

// Compiled node: topology plus resolved successor/predecessor indices. All
// edges into a node deliver to that node's single channel.
struct GraphNode {
  ProcessorConfig config;
  std::vector<size_t> successors;
  std::vector<size_t> predecessors;
};

// Validated DAG of stage processors. Immutable after compile; safe to share
// read-only across workers.
class PipelineGraph {
 public:
  const std::vector<GraphNode>& nodes() const { return nodes_; }
  const std::vector<size_t>& topo_order() const { return topo_order_; }
  const std::vector<size_t>& sources() const { return sources_; }
  const std::vector<size_t>& sinks() const { return sinks_; }
  const std::map<std::string, size_t>& index_by_id() const { return index_; }
  const std::map<std::string, std::string>& tenants() const { return tenants_; }

  size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) raise(Errc::DanglingEdge, "unknown processor id: " + id);
    return it->second;
  }

  // Validates ids, operator kinds, edge endpoints, channel capacities and
  // acyclicity; records a topological order for diagnostics.
  static PipelineGraph compile(const PipelineConfig& cfg,
                               const std::set<std::string>& known_operators) {
    PipelineGraph g;
    if (cfg.processors.empty()) raise(Errc::InvalidConfig, "pipeline has no processors");
    for (const auto& pc : cfg.processors) {
      if (g.index_.count(pc.id)) raise(Errc::InvalidConfig, "duplicate processor id: " + pc.id);
      if (!known_operators.count(pc.operator_kind))
        raise(Errc::UnknownOperator, pc.operator_kind + " (processor " + pc.id + ")");
      if (pc.batch_size < 1) raise(Errc::InvalidConfig, pc.id + ": batch_size must be >= 1");
      if (pc.parallelism < 1) raise(Errc::InvalidConfig, pc.id + ": parallelism must be >= 1");
      if (pc.channel_capacity < pc.batch_size)
        raise(Errc::InvalidConfig, pc.id + ": channel_capacity < batch_size");
      g.index_[pc.id] = g.nodes_.size();
      g.nodes_.push_back(GraphNode{pc, {}, {}});
    }
    for (const auto& [from, to] : cfg.edges) {
      auto fi = g.index_.find(from);
      auto ti = g.index_.find(to);
      if (fi == g.index_.end()) raise(Errc::DanglingEdge, "edge source " + from + " not defined");
      if (ti == g.index_.end()) raise(Errc::DanglingEdge, "edge target " + to + " not defined");
      g.nodes_[fi->second].successors.push_back(ti->second);
      g.nodes_[ti->second].predecessors.push_back(fi->second);
    }
    for (const auto& [tenant, entry] : cfg.tenants) {
      if (!g.index_.count(entry))
        raise(Errc::DanglingEdge, "tenant " + tenant + " entry " + entry + " not defined");
    }
    g.tenants_ = cfg.tenants;

    // Kahn's algorithm; leftovers mean a cycle.
    std::vector<size_t> indeg(g.nodes_.size(), 0);
    for (size_t i = 0; i < g.nodes_.size(); ++i) indeg[i] = g.nodes_[i].predecessors.size();
    std::deque<size_t> ready;
    for (size_t i = 0; i < g.nodes_.size(); ++i)
      if (indeg[i] == 0) {
        ready.push_back(i);
        g.sources_.push_back(i);
      }
    while (!ready.empty()) {
      size_t i = ready.front();
      ready.pop_front();
      g.topo_order_.push_back(i);
      for (size_t s : g.nodes_[i].successors)
        if (--indeg[s] == 0) ready.push_back(s);
    }
    if (g.topo_order_.size() != g.nodes_.size()) {
      std::string stuck;
      for (size_t i = 0; i < g.nodes_.size(); ++i)
        if (indeg[i] > 0) stuck += (stuck.empty() ? "" : ", ") + g.nodes_[i].config.id;
      raise(Errc::CycleDetected, "cycle through: " + stuck);
    }
    for (size_t i = 0; i < g.nodes_.size(); ++i)
      if (g.nodes_[i].successors.empty()) g.sinks_.push_back(i);
    if (g.sources_.empty()) raise(Errc::InvalidConfig, "pipeline has no source processor");
    return g;
  }

 private:
  std::vector<GraphNode> nodes_;
  std::vector<size_t> topo_order_;
  std::vector<size_t> sources_;
  std::vector<size_t> sinks_;
  std::map<std::string, size_t> index_;
  std::map<std::string, std::string> tenants_;
};

}  // namespace stagepipe
