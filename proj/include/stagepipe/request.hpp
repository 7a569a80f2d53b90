#pragma once

#include <map>
#include <string>
#include <vector>

#include "stagepipe/common.hpp"
#include "stagepipe/dense.hpp"

namespace stagepipe {

// One candidate item from the recall phase, carrying its estimated score.
struct Candidate {
  std::string item_id;
  double escore = 0.0;
  FeatureGroups feats;
};

struct ScoreRequest {
  std::string tenant;  // empty: default tenant
  std::string user_id;
  FeatureGroups user_feats;
  std::vector<Candidate> candidates;
  int64_t timestamp_ms = 0;  // logical time (trace replay) or wall clock
  std::string qid;           // item-queue identifier for load shedding

  Json to_json() const {
    Json j;
    if (!tenant.empty()) j["tenant"] = tenant;
    j["user"] = user_id;
    j["user_feats"] = user_feats;
    if (!qid.empty()) j["qid"] = qid;
    j["ts_ms"] = timestamp_ms;
    j["candidates"] = Json::array();
    for (const auto& c : candidates)
      j["candidates"].push_back({{"item", c.item_id}, {"escore", c.escore}, {"feats", c.feats}});
    return j;
  }

  static ScoreRequest from_json(const Json& j) {
    ScoreRequest r;
    r.tenant = j.value("tenant", "");
    r.user_id = j.at("user").get<std::string>();
    if (j.contains("user_feats")) r.user_feats = j["user_feats"].get<FeatureGroups>();
    r.qid = j.value("qid", "");
    r.timestamp_ms = j.value("ts_ms", int64_t{0});
    for (const auto& jc : j.value("candidates", Json::array())) {
      Candidate c;
      c.item_id = jc.at("item").get<std::string>();
      c.escore = jc.value("escore", 0.0);
      if (jc.contains("feats")) c.feats = jc["feats"].get<FeatureGroups>();
      r.candidates.push_back(std::move(c));
    }
    return r;
  }
};

struct ScoredItem {
  std::string item_id;
  std::map<std::string, double> scores;  // model name -> final score
  bool shed = false;
  bool cache_hit = false;
};

struct StageSpan {
  std::string stage;
  double queue_wait_us = 0.0;
  double service_us = 0.0;
};

// Response items are a subset of request items: shed candidates are absent
// from scoring and flagged via shed_count metadata.
struct ScoreResponse {
  uint64_t request_id = 0;
  std::string tenant;
  int64_t generation = 0;
  std::vector<ScoredItem> items;
  size_t shed_count = 0;
  std::vector<StageSpan> trace;

  Json to_json() const {
    Json j;
    j["request_id"] = request_id;
    if (!tenant.empty()) j["tenant"] = tenant;
    j["generation"] = generation;
    j["shed_count"] = shed_count;
    j["items"] = Json::array();
    for (const auto& it : items) {
      Json ji{{"item", it.item_id}, {"shed", it.shed}, {"cache_hit", it.cache_hit}};
      if (it.scores.size() == 1)
        ji["score"] = it.scores.begin()->second;
      else
        ji["scores"] = it.scores;
      j["items"].push_back(std::move(ji));
    }
    j["trace"] = Json::array();
    for (const auto& t : trace)
      j["trace"].push_back(
          {{"stage", t.stage}, {"queue_us", t.queue_wait_us}, {"service_us", t.service_us}});
    return j;
  }

  static ScoreResponse from_json(const Json& j) {
    ScoreResponse r;
    r.request_id = j.value("request_id", uint64_t{0});
    r.tenant = j.value("tenant", "");
    r.generation = j.at("generation").get<int64_t>();
    r.shed_count = j.value("shed_count", size_t{0});
    for (const auto& ji : j.value("items", Json::array())) {
      ScoredItem it;
      it.item_id = ji.at("item").get<std::string>();
      it.shed = ji.value("shed", false);
      it.cache_hit = ji.value("cache_hit", false);
      if (ji.contains("score"))
        it.scores["default"] = ji["score"].get<double>();
      else if (ji.contains("scores"))
        it.scores = ji["scores"].get<std::map<std::string, double>>();
      r.items.push_back(std::move(it));
    }
    for (const auto& jt : j.value("trace", Json::array()))
      r.trace.push_back({jt.at("stage").get<std::string>(), jt.value("queue_us", 0.0),
                         jt.value("service_us", 0.0)});
    return r;
  }
};

}  // namespace stagepipe
