#pragma once

#include <any>
#include <condition_variable>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "stagepipe/channel.hpp"
#include "stagepipe/common.hpp"
#include "stagepipe/event.hpp"
#include "stagepipe/graph.hpp"

namespace stagepipe {

// Terminal result of one request: exactly one Outcome is produced per
// submitted request (response or error), never both, never neither.
struct Outcome {
  uint64_t request_id = 0;
  bool ok = false;
  std::any response;
  Errc error = Errc::StageFailure;
  std::string error_detail;
  std::vector<StageTiming> trace;
};

// Deterministic tenant choice: stable hash of request_id against cumulative
// weights, so the same request always routes to the same test group.
inline std::string dispatch_tenant(uint64_t request_id,
                                   const std::map<std::string, double>& split_table) {
  if (split_table.empty()) raise(Errc::NoTenants, "empty tenant split table");
  double total = 0.0;
  for (const auto& [tenant, w] : split_table) {
    if (w < 0.0) raise(Errc::InvalidConfig, "negative tenant weight for " + tenant);
    total += w;
  }
  if (total <= 0.0) raise(Errc::NoTenants, "tenant weights sum to zero");
  double x = (static_cast<double>(mix64(request_id)) / 18446744073709551616.0) * total;
  double cum = 0.0;
  const std::string* last = nullptr;
  for (const auto& [tenant, w] : split_table) {
    cum += w;
    last = &tenant;
    if (x < cum) return tenant;
  }
  return *last;
}

// Collects what an operator invocation produced. Thread-confined: the engine
// hands a fresh buffer to every invocation and routes its contents afterward.
class EmitBuffer {
 public:
  struct Emission {
    Event event;
    std::optional<std::string> target;
  };
  struct Completion {
    uint64_t request_id;
    bool ok;
    std::any response;
    Errc error = Errc::StageFailure;
    std::string detail;
    std::vector<StageTiming> trace;
    bool has_timing_source = false;
    TimePoint enqueue{};
  };

  // Broadcast to all successors (or terminate with the payload as response
  // when the stage is a sink).
  void emit(Event e) { emissions_.push_back({std::move(e), std::nullopt}); }

  // Route to one named successor.
  void emit_to(const std::string& target, Event e) {
    emissions_.push_back({std::move(e), target});
  }

  void finish_ok(Event e, std::any response) {
    Completion c;
    c.request_id = e.request_id;
    c.ok = true;
    c.response = std::move(response);
    c.trace = std::move(e.trace);
    c.has_timing_source = true;
    c.enqueue = e.enqueue_time;
    completions_.push_back(std::move(c));
  }

  void finish_error(const Event& e, Errc err, std::string detail) {
    Completion c;
    c.request_id = e.request_id;
    c.ok = false;
    c.error = err;
    c.detail = std::move(detail);
    c.trace = e.trace;
    c.has_timing_source = true;
    c.enqueue = e.enqueue_time;
    completions_.push_back(std::move(c));
  }

  // For terminations without a live event (join staleness sweep).
  void finish_error_by_id(uint64_t request_id, Errc err, std::string detail) {
    Completion c;
    c.request_id = request_id;
    c.ok = false;
    c.error = err;
    c.detail = std::move(detail);
    completions_.push_back(std::move(c));
  }

  std::vector<Emission>& emissions() { return emissions_; }
  std::vector<Completion>& completions() { return completions_; }

 private:
  std::vector<Emission> emissions_;
  std::vector<Completion> completions_;
};

// Shared read-only services an operator can reach during invocation.
class StageContext {
 public:
  StageContext(std::string stage_id, Json settings,
               std::map<std::string, std::string> tenant_entries)
      : stage_id_(std::move(stage_id)),
        settings_(std::move(settings)),
        tenant_entries_(std::move(tenant_entries)) {}

  const std::string& stage_id() const { return stage_id_; }
  const Json& settings() const { return settings_; }
  const std::map<std::string, std::string>& tenant_entries() const { return tenant_entries_; }

  void set_split_table(std::map<std::string, double> t) {
    std::lock_guard<std::mutex> lk(mu_);
    split_ = std::make_shared<const std::map<std::string, double>>(std::move(t));
  }
  std::shared_ptr<const std::map<std::string, double>> split_table() const {
    std::lock_guard<std::mutex> lk(mu_);
    return split_;
  }

 private:
  std::string stage_id_;
  Json settings_;
  std::map<std::string, std::string> tenant_entries_;
  mutable std::mutex mu_;
  std::shared_ptr<const std::map<std::string, double>> split_;
};

// A unit of work mapping a batch of events to output events. One instance per
// stage; up to `parallelism` concurrent invocations, so implementations must
// be thread-safe.
class Operator {
 public:
  virtual ~Operator() = default;
  virtual void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext& ctx) = 0;

  // Periodic housekeeping (e.g. join staleness sweep).
  virtual bool wants_tick() const { return false; }
  virtual void tick(TimePoint /*now*/, EmitBuffer& /*out*/, StageContext& /*ctx*/) {}
};

using OperatorFactory =
    std::function<std::shared_ptr<Operator>(const ProcessorConfig&)>;

class OperatorRegistry {
 public:
  OperatorRegistry() = default;

  void add(const std::string& kind, OperatorFactory factory) {
    factories_[kind] = std::move(factory);
  }

  bool known(const std::string& kind) const { return factories_.count(kind) > 0; }

  std::set<std::string> kinds() const {
    std::set<std::string> out;
    for (auto& [k, _] : factories_) out.insert(k);
    return out;
  }

  std::shared_ptr<Operator> create(const ProcessorConfig& cfg) const {
    auto it = factories_.find(cfg.operator_kind);
    if (it == factories_.end()) raise(Errc::UnknownOperator, cfg.operator_kind);
    return it->second(cfg);
  }

 private:
  std::map<std::string, OperatorFactory> factories_;
};

// ---------------------------------------------------------------------------
// Built-in operators
// ---------------------------------------------------------------------------

// Wraps a callable; the workhorse for tests and simple stages.
class FnOperator : public Operator {
 public:
  using Fn = std::function<void(std::vector<Event>&, EmitBuffer&, StageContext&)>;
  explicit FnOperator(Fn fn) : fn_(std::move(fn)) {}
  void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext& ctx) override {
    fn_(batch, out, ctx);
  }

 private:
  Fn fn_;
};

class IdentityOperator : public Operator {
 public:
  void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext&) override {
    for (auto& e : batch) out.emit(std::move(e));
  }
};

class RespondOperator : public Operator {
 public:
  void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext&) override {
    for (auto& e : batch) {
      std::any payload = e.payload;
      out.finish_ok(std::move(e), std::move(payload));
    }
  }
};

// Per-request fragment accumulation with a staleness timeout. After the join
// emits for a request_id no state for that id remains; fragments older than
// the timeout are discarded and the request errs out.
class JoinBuffer {
 public:
  explicit JoinBuffer(std::chrono::milliseconds timeout) : timeout_(timeout) {}

  // Returns the complete fragment set (sorted by fragment_index) once all
  // fragment_total fragments of the request have arrived.
  std::optional<std::vector<Event>> add(Event e, TimePoint now) {
    std::lock_guard<std::mutex> lk(mu_);
    auto& p = pending_[e.request_id];
    if (p.fragments.empty()) {
      p.first_arrival = now;
      p.expected = e.fragment_total;
    }
    if (e.fragment_total != p.expected)
      throw Error(Errc::StageFailure, "fragment_total mismatch within request");
    for (const auto& f : p.fragments)
      if (f.fragment_index == e.fragment_index)
        throw Error(Errc::StageFailure, "duplicate fragment_index");
    if (e.fragment_index >= p.expected)
      throw Error(Errc::StageFailure, "fragment_index out of range");
    p.fragments.push_back(std::move(e));
    if (p.fragments.size() == p.expected) {
      std::vector<Event> full = std::move(p.fragments);
      pending_.erase(full.front().request_id);
      std::sort(full.begin(), full.end(),
                [](const Event& a, const Event& b) { return a.fragment_index < b.fragment_index; });
      return full;
    }
    return std::nullopt;
  }

  // Discards entries older than the timeout; returns their request ids.
  std::vector<uint64_t> sweep(TimePoint now) {
    std::lock_guard<std::mutex> lk(mu_);
    std::vector<uint64_t> expired;
    for (auto it = pending_.begin(); it != pending_.end();) {
      if (now - it->second.first_arrival >= timeout_) {
        expired.push_back(it->first);
        it = pending_.erase(it);
      } else {
        ++it;
      }
    }
    return expired;
  }

  size_t pending_count() const {
    std::lock_guard<std::mutex> lk(mu_);
    return pending_.size();
  }

 private:
  struct Pending {
    std::vector<Event> fragments;
    uint32_t expected = 0;
    TimePoint first_arrival{};
  };

  std::chrono::milliseconds timeout_;
  mutable std::mutex mu_;
  std::unordered_map<uint64_t, Pending> pending_;
};

// Emits one merged event per request once all fragments arrived. Settings:
//   timeout_ms  — staleness window (default 1000)
//   merge       — "collect" (payload = vector<any> by fragment_index) or
//                 "first" (payload of fragment 0; fragments share state)
class JoinOperator : public Operator {
 public:
  explicit JoinOperator(const Json& settings)
      : buffer_(std::chrono::milliseconds(settings.value("timeout_ms", 1000))),
        merge_first_(settings.value("merge", "collect") == std::string("first")) {}

  void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext& ctx) override {
    TimePoint now = Clock::now();
    for (auto& e : batch) {
      uint64_t rid = e.request_id;
      std::optional<std::vector<Event>> full;
      try {
        full = buffer_.add(std::move(e), now);
      } catch (const Error& err) {
        out.finish_error_by_id(rid, Errc::StageFailure, ctx.stage_id() + ": " + err.what());
        continue;
      }
      if (!full) continue;
      out.emit(merge(std::move(*full)));
    }
    sweep(now, out, ctx);
  }

  bool wants_tick() const override { return true; }

  void tick(TimePoint now, EmitBuffer& out, StageContext& ctx) override { sweep(now, out, ctx); }

  const JoinBuffer& buffer() const { return buffer_; }

 private:
  Event merge(std::vector<Event> fragments) {
    Event merged;
    merged.request_id = fragments.front().request_id;
    merged.tenant = fragments.front().tenant;
    merged.fragment_index = 0;
    merged.fragment_total = 1;
    merged.deadline = fragments.front().deadline;
    merged.enqueue_time = fragments.front().enqueue_time;
    for (const auto& f : fragments) {
      merged.deadline = std::min(merged.deadline, f.deadline);
      if (f.enqueue_time < merged.enqueue_time) merged.enqueue_time = f.enqueue_time;
      for (const auto& t : f.trace) merged.trace.push_back(t);
    }
    if (merge_first_) {
      merged.payload = std::move(fragments.front().payload);
    } else {
      std::vector<std::any> parts;
      parts.reserve(fragments.size());
      for (auto& f : fragments) parts.push_back(std::move(f.payload));
      merged.payload = std::move(parts);
    }
    return merged;
  }

  void sweep(TimePoint now, EmitBuffer& out, StageContext& ctx) {
    for (uint64_t rid : buffer_.sweep(now))
      out.finish_error_by_id(rid, Errc::DeadlineExceeded,
                             ctx.stage_id() + ": join fragments stale");
  }

  JoinBuffer buffer_;
  bool merge_first_;
};

// Routes each event to its tenant's branch entry using the engine's current
// split table (swappable at runtime; topology is not).
class TenantDispatchOperator : public Operator {
 public:
  void invoke(std::vector<Event>& batch, EmitBuffer& out, StageContext& ctx) override {
    auto table = ctx.split_table();
    for (auto& e : batch) {
      if (!table || table->empty()) {
        out.finish_error(e, Errc::NoTenants, ctx.stage_id() + ": no tenant split table");
        continue;
      }
      std::string tenant;
      try {
        tenant = dispatch_tenant(e.request_id, *table);
      } catch (const Error& err) {
        out.finish_error(e, err.code(), ctx.stage_id() + ": " + err.what());
        continue;
      }
      auto entry = ctx.tenant_entries().find(tenant);
      if (entry == ctx.tenant_entries().end()) {
        out.finish_error(e, Errc::StageFailure,
                         ctx.stage_id() + ": tenant " + tenant + " has no branch entry");
        continue;
      }
      e.tenant = tenant;
      out.emit_to(entry->second, std::move(e));
    }
  }
};

inline OperatorRegistry default_operator_registry() {
  OperatorRegistry reg;
  reg.add("identity", [](const ProcessorConfig&) { return std::make_shared<IdentityOperator>(); });
  reg.add("respond", [](const ProcessorConfig&) { return std::make_shared<RespondOperator>(); });
  reg.add("join",
          [](const ProcessorConfig& c) { return std::make_shared<JoinOperator>(c.settings); });
  reg.add("tenant_dispatch",
          [](const ProcessorConfig&) { return std::make_shared<TenantDispatchOperator>(); });
  return reg;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct EngineOptions {
  std::chrono::milliseconds tick_interval{20};
  bool deadline_watchdog = true;
};

// Runs a compiled PipelineGraph fully asynchronously: every stage processor
// owns one bounded channel and up to `parallelism` worker threads. Channels
// are the only shared mutable state between stages.
class PipelineEngine {
 public:
  PipelineEngine(PipelineGraph graph, const OperatorRegistry& registry,
                 EngineOptions opts = {})
      : graph_(std::move(graph)), opts_(opts) {
    stages_.reserve(graph_.nodes().size());
    for (const auto& node : graph_.nodes()) {
      auto st = std::make_unique<StageRuntime>(node.config.channel_capacity);
      st->node = &node;
      st->op = registry.create(node.config);
      st->ctx = std::make_unique<StageContext>(node.config.id, node.config.settings,
                                               graph_.tenants());
      stages_.push_back(std::move(st));
    }
    for (auto& st : stages_) {
      for (size_t w = 0; w < st->node->config.parallelism; ++w)
        st->workers.emplace_back([this, s = st.get()] { worker_loop(*s); });
    }
    housekeeper_ = std::thread([this] { housekeeping_loop(); });
  }

  PipelineEngine(const PipelineEngine&) = delete;
  PipelineEngine& operator=(const PipelineEngine&) = delete;

  ~PipelineEngine() { stop(); }

  const PipelineGraph& graph() const { return graph_; }
  Metrics& metrics() { return metrics_; }

  void set_split_table(std::map<std::string, double> table) {
    for (auto& st : stages_) st->ctx->set_split_table(table);
  }

  size_t outstanding() const {
    std::lock_guard<std::mutex> lk(tickets_mu_);
    return tickets_.size();
  }

  // Enqueues one request event at the entry stage. The returned future yields
  // exactly one Outcome. Backpressure: blocks while the entry channel is full.
  std::future<Outcome> submit(Event e, const std::string& entry = "") {
    size_t entry_idx;
    if (!entry.empty()) {
      entry_idx = graph_.index_of(entry);
    } else if (graph_.sources().size() == 1) {
      entry_idx = graph_.sources()[0];
    } else {
      raise(Errc::InvalidConfig, "ambiguous entry: pipeline has multiple sources");
    }
    std::promise<Outcome> promise;
    auto fut = promise.get_future();
    {
      std::lock_guard<std::mutex> lk(tickets_mu_);
      if (stopping_) {
        promise.set_value(error_outcome(e.request_id, Errc::PipelineUnavailable, "engine stopped"));
        return fut;
      }
      if (!tickets_.emplace(e.request_id, Ticket{std::move(promise), e.deadline}).second) {
        std::promise<Outcome> dup;
        auto f2 = dup.get_future();
        dup.set_value(error_outcome(e.request_id, Errc::InvalidConfig,
                                    "request_id already in flight"));
        return f2;
      }
    }
    metrics_.add("requests_total");
    const uint64_t rid = e.request_id;
    e.enqueue_time = Clock::now();
    if (!stages_[entry_idx]->channel.push(std::move(e))) {
      // Channel closed during shutdown.
      finish(rid, error_outcome(rid, Errc::PipelineUnavailable, "shutting down"));
    }
    return fut;
  }

  // Synchronous convenience wrapper around submit().
  Outcome execute(Event e, const std::string& entry = "") { return submit(std::move(e), entry).get(); }

  // Blocks until every outstanding request has reached a terminal outcome.
  void drain() {
    std::unique_lock<std::mutex> lk(tickets_mu_);
    drained_.wait(lk, [&] { return tickets_.empty(); });
  }

  void stop() {
    {
      std::lock_guard<std::mutex> lk(tickets_mu_);
      if (stopping_) return;
      stopping_ = true;
    }
    for (auto& st : stages_) st->channel.close();
    for (auto& st : stages_)
      for (auto& w : st->workers)
        if (w.joinable()) w.join();
    if (housekeeper_.joinable()) housekeeper_.join();
    // Anything still ticketed can no longer complete.
    std::vector<std::pair<uint64_t, Ticket>> leftovers;
    {
      std::lock_guard<std::mutex> lk(tickets_mu_);
      for (auto& [rid, t] : tickets_) leftovers.emplace_back(rid, std::move(t));
      tickets_.clear();
    }
    for (auto& [rid, t] : leftovers)
      t.promise.set_value(error_outcome(rid, Errc::PipelineUnavailable, "engine stopped"));
    drained_.notify_all();
  }

  size_t queue_depth(const std::string& stage_id) const {
    return stages_[graph_.index_of(stage_id)]->channel.size();
  }

 private:
  struct Ticket {
    std::promise<Outcome> promise;
    TimePoint deadline;
  };

  struct StageRuntime {
    explicit StageRuntime(size_t capacity) : channel(capacity) {}
    const GraphNode* node = nullptr;
    BoundedChannel<Event> channel;
    std::shared_ptr<Operator> op;
    std::unique_ptr<StageContext> ctx;
    std::vector<std::thread> workers;
  };

  static Outcome error_outcome(uint64_t rid, Errc err, std::string detail) {
    Outcome o;
    o.request_id = rid;
    o.ok = false;
    o.error = err;
    o.error_detail = std::move(detail);
    return o;
  }

  void finish(uint64_t rid, Outcome outcome) {
    std::promise<Outcome> promise;
    bool found = false;
    {
      std::lock_guard<std::mutex> lk(tickets_mu_);
      auto it = tickets_.find(rid);
      if (it != tickets_.end()) {
        promise = std::move(it->second.promise);
        tickets_.erase(it);
        found = true;
      }
    }
    if (!found) return;  // already terminated (first outcome wins)
    if (outcome.ok)
      metrics_.add("responses_total");
    else
      metrics_.add("errors_total");
    promise.set_value(std::move(outcome));
    drained_.notify_all();
  }

  void worker_loop(StageRuntime& st) {
    const size_t batch_size = st.node->config.batch_size;
    const bool ticks = st.op->wants_tick();
    const std::string& stage_id = st.node->config.id;
    for (;;) {
      std::vector<Event> batch =
          ticks ? st.channel.pop_batch_for(batch_size, opts_.tick_interval)
                : st.channel.pop_batch(batch_size);
      if (batch.empty()) {
        if (st.channel.closed() && st.channel.size() == 0) {
          if (ticks) run_tick(st);  // final sweep so pending joins resolve
          break;
        }
        if (ticks) run_tick(st);
        continue;
      }

      TimePoint start = Clock::now();
      // Deadline gate: expired events never reach the operator.
      std::vector<Event> live;
      live.reserve(batch.size());
      for (auto& e : batch) {
        if (e.expired(start)) {
          Outcome o = error_outcome(e.request_id, Errc::DeadlineExceeded,
                                    "expired at stage " + stage_id);
          o.trace = std::move(e.trace);
          finish(e.request_id, std::move(o));
        } else {
          live.push_back(std::move(e));
        }
      }
      if (live.empty()) continue;

      std::vector<TimePoint> enqueues;
      enqueues.reserve(live.size());
      for (const auto& e : live) enqueues.push_back(e.enqueue_time);

      EmitBuffer out;
      uint64_t cpu0 = thread_cpu_ns();
      try {
        st.op->invoke(live, out, *st.ctx);
      } catch (const Error& err) {
        out = EmitBuffer{};
        for (auto& e : live)
          out.finish_error(e, err.code() == Errc::DeadlineExceeded ? Errc::DeadlineExceeded
                                                                   : Errc::StageFailure,
                           stage_id + ": " + err.what());
      } catch (const std::exception& ex) {
        out = EmitBuffer{};
        for (auto& e : live) out.finish_error(e, Errc::StageFailure, stage_id + ": " + ex.what());
      }
      uint64_t cpu1 = thread_cpu_ns();
      TimePoint end = Clock::now();

      metrics_.add_cpu_ns(stage_id, cpu1 - cpu0);
      metrics_.add("stage_events{stage=\"" + stage_id + "\"}", live.size());
      auto& hist = metrics_.histogram("stage_latency{stage=\"" + stage_id + "\"}");
      for (TimePoint enq : enqueues)
        hist.record(std::chrono::duration<double, std::micro>(end - enq).count());

      route(st, out, start, end);
    }
  }

  void run_tick(StageRuntime& st) {
    EmitBuffer out;
    TimePoint now = Clock::now();
    st.op->tick(now, out, *st.ctx);
    route(st, out, now, now);
  }

  void route(StageRuntime& st, EmitBuffer& out, TimePoint start, TimePoint end) {
    const std::string& stage_id = st.node->config.id;
    for (auto& em : out.emissions()) {
      StageTiming timing{stage_id, em.event.enqueue_time, start, end};
      em.event.trace.push_back(timing);
      if (em.target) {
        auto it = graph_.index_by_id().find(*em.target);
        bool is_successor =
            it != graph_.index_by_id().end() &&
            std::find(st.node->successors.begin(), st.node->successors.end(), it->second) !=
                st.node->successors.end();
        if (!is_successor) {
          finish_from_event(em.event, Errc::StageFailure,
                            stage_id + ": emit target " + *em.target + " is not a successor");
          continue;
        }
        push_downstream(*stages_[it->second], std::move(em.event));
      } else if (st.node->successors.empty()) {
        // Emitting at a sink terminates the request with the payload.
        Outcome o;
        o.request_id = em.event.request_id;
        o.ok = true;
        o.response = std::move(em.event.payload);
        o.trace = std::move(em.event.trace);
        finish(o.request_id, std::move(o));
      } else if (st.node->successors.size() == 1) {
        push_downstream(*stages_[st.node->successors[0]], std::move(em.event));
      } else {
        for (size_t si : st.node->successors) {
          Event copy = em.event;
          push_downstream(*stages_[si], std::move(copy));
        }
      }
    }
    for (auto& c : out.completions()) {
      Outcome o;
      o.request_id = c.request_id;
      o.ok = c.ok;
      o.response = std::move(c.response);
      o.error = c.error;
      o.error_detail = std::move(c.detail);
      o.trace = std::move(c.trace);
      if (c.has_timing_source) o.trace.push_back(StageTiming{stage_id, c.enqueue, start, end});
      finish(o.request_id, std::move(o));
    }
  }

  void push_downstream(StageRuntime& target, Event e) {
    e.enqueue_time = Clock::now();
    uint64_t rid = e.request_id;
    if (!target.channel.push(std::move(e)))
      finish(rid, error_outcome(rid, Errc::PipelineUnavailable, "channel closed"));
  }

  void finish_from_event(Event& e, Errc err, std::string detail) {
    Outcome o = error_outcome(e.request_id, err, std::move(detail));
    o.trace = std::move(e.trace);
    finish(e.request_id, std::move(o));
  }

  void housekeeping_loop() {
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(tickets_mu_);
        if (stopping_) return;
      }
      std::this_thread::sleep_for(opts_.tick_interval);
      for (auto& st : stages_)
        metrics_.set_gauge("queue_depth{stage=\"" + st->node->config.id + "\"}",
                           static_cast<double>(st->channel.size()));
      if (!opts_.deadline_watchdog) continue;
      TimePoint now = Clock::now();
      std::vector<uint64_t> expired;
      {
        std::lock_guard<std::mutex> lk(tickets_mu_);
        for (auto& [rid, t] : tickets_)
          if (now >= t.deadline) expired.push_back(rid);
      }
      for (uint64_t rid : expired)
        finish(rid, error_outcome(rid, Errc::DeadlineExceeded, "deadline watchdog"));
    }
  }

  PipelineGraph graph_;
  EngineOptions opts_;
  Metrics metrics_;
  std::vector<std::unique_ptr<StageRuntime>> stages_;
  mutable std::mutex tickets_mu_;
  std::condition_variable drained_;
  std::unordered_map<uint64_t, Ticket> tickets_;
  bool stopping_ = false;
  std::thread housekeeper_;
};

// Convenience: compile a config against a registry's known operator kinds.
inline PipelineGraph compile(const PipelineConfig& cfg, const OperatorRegistry& registry) {
  return PipelineGraph::compile(cfg, registry.kinds());
}

}  // namespace stagepipe
