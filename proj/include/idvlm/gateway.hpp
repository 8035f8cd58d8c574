#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "idvlm/errors.hpp"
#include "idvlm/jsonl.hpp"
#include "idvlm/kv_config.hpp"
#include "idvlm/rng.hpp"

namespace idvlm {

// Retryable: the same request may succeed later (timeouts, 429, 5xx).
class TransientError : public Error {
 public:
  using Error::Error;
};

// Not retryable (auth, malformed request).
class PermanentError : public Error {
 public:
  using Error::Error;
};

struct ChatPart {
  enum class Kind { kText, kImage };
  Kind kind = Kind::kText;
  std::string value;  // text, or an image locator

  static ChatPart text(std::string s) { return {Kind::kText, std::move(s)}; }
  static ChatPart image(std::string ref) { return {Kind::kImage, std::move(ref)}; }
  friend bool operator==(const ChatPart&, const ChatPart&) = default;
};

struct ChatRequest {
  std::string system;
  std::vector<ChatPart> parts;
  int max_tokens = 512;
  double temperature = 0.0;

  void validate() const {
    if (parts.empty()) throw ValidationError("chat request: at least one part is required");
    if (max_tokens < 1) throw ValidationError("chat request: max_tokens must be >= 1");
    if (!(temperature >= 0.0)) throw ValidationError("chat request: temperature must be >= 0");
  }
};

inline constexpr double kJudgeTemperature = 0.0;
inline constexpr double kGeneratorTemperature = 1.0;

struct ChatResponse {
  std::string text;
  std::string finish_reason = "stop";
  double latency_ms = 0.0;
  std::map<std::string, std::string> metadata;
};

// Content hash of (system, parts); generation caps are excluded.
inline std::string request_fingerprint(const ChatRequest& r) {
  std::string canon = "s:" + std::to_string(r.system.size()) + ":" + r.system;
  for (const auto& p : r.parts) {
    canon += p.kind == ChatPart::Kind::kText ? "|t:" : "|i:";
    canon += std::to_string(p.value.size()) + ":" + p.value;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canon)));
  return buf;
}

struct GatewayConfig {
  std::string endpoint = "mock";
  std::string model = "mock";
  double timeout_s = 60.0;
  int max_retries = 3;
  double backoff_base_ms = 500.0;
  int max_in_flight = 4;

  void validate() const {
    if (max_retries < 0) throw ConfigError("gateway: max_retries must be >= 0");
    if (max_in_flight < 1) throw ConfigError("gateway: max_in_flight must be >= 1");
    if (!(timeout_s > 0.0)) throw ConfigError("gateway: timeout must be > 0");
    if (!(backoff_base_ms >= 0.0)) throw ConfigError("gateway: backoff base must be >= 0");
    if (endpoint.empty()) throw ConfigError("gateway: endpoint is empty");
  }

  static GatewayConfig from_kv(const KvConfig& kv) {
    GatewayConfig c;
    c.endpoint = kv.str_or("endpoint", c.endpoint);
    c.model = kv.str_or("model", c.model);
    c.timeout_s = kv.real_or("timeout_s", c.timeout_s);
    c.max_retries = static_cast<int>(kv.integer_or("max_retries", c.max_retries));
    c.backoff_base_ms = kv.real_or("backoff_base_ms", c.backoff_base_ms);
    c.max_in_flight = static_cast<int>(kv.integer_or("max_in_flight", c.max_in_flight));
    c.validate();
    return c;
  }

  KvConfig to_kv() const {
    KvConfig kv;
    kv.set("endpoint", endpoint);
    kv.set("model", model);
    kv.set("timeout_s", std::to_string(timeout_s));
    kv.set("max_retries", std::to_string(max_retries));
    kv.set("backoff_base_ms", std::to_string(backoff_base_ms));
    kv.set("max_in_flight", std::to_string(max_in_flight));
    return kv;
  }
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual ChatResponse send(const ChatRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Mock transport
// ---------------------------------------------------------------------------

// JSON Lines, either all {"response": ...} (ordered replay) or all
// {"fingerprint": ..., "response": ...} (keyed). An ordered entry may carry
// "error": "transient" | "permanent" instead of a response.
struct MockScript {
  struct Entry {
    std::string response;
    std::string error;
  };
  bool keyed = false;
  std::vector<Entry> ordered;
  std::map<std::string, std::string> by_fingerprint;

  static MockScript ordered_responses(std::vector<std::string> responses) {
    MockScript s;
    for (auto& r : responses) s.ordered.push_back({std::move(r), ""});
    return s;
  }

  static MockScript keyed_responses(std::map<std::string, std::string> m) {
    MockScript s;
    s.keyed = true;
    s.by_fingerprint = std::move(m);
    return s;
  }

  static MockScript parse(const std::string& text, const std::string& origin = "<mock script>") {
    MockScript s;
    const auto rows = parse_jsonl(text, origin);
    if (rows.empty()) throw ConfigError(origin + ": mock script is empty");
    s.keyed = rows.front().contains("fingerprint");
    std::size_t line = 0;
    for (const auto& row : rows) {
      ++line;
      const std::string where = origin + " entry " + std::to_string(line);
      if (!row.is_object()) throw ConfigError(where + ": expected an object");
      if (row.contains("fingerprint") != s.keyed) throw ConfigError(where + ": mixes keyed and ordered entries");
      with_origin(where, [&] {
        if (s.keyed) {
          if (!s.by_fingerprint.emplace(row.at("fingerprint").get<std::string>(), row.at("response").get<std::string>())
                   .second) {
            throw ConfigError(where + ": duplicate fingerprint");
          }
          return;
        }
        Entry e;
        if (row.contains("error")) {
          e.error = row.at("error").get<std::string>();
          if (e.error != "transient" && e.error != "permanent") {
            throw ConfigError(where + ": error must be transient or permanent");
          }
        } else {
          e.response = row.at("response").get<std::string>();
        }
        s.ordered.push_back(std::move(e));
      });
    }
    return s;
  }

  static MockScript load(const std::string& path) { return parse(read_text_file(path), path); }

  std::string to_jsonl() const {
    std::vector<Json> rows;
    if (keyed) {
      for (const auto& [fp, r] : by_fingerprint) rows.push_back({{"fingerprint", fp}, {"response", r}});
    } else {
      for (const auto& e : ordered) {
        rows.push_back(e.error.empty() ? Json{{"response", e.response}} : Json{{"error", e.error}});
      }
    }
    return idvlm::to_jsonl(rows);
  }
};

class MockTransport : public Transport {
 public:
  explicit MockTransport(MockScript script) : script_(std::move(script)) {}

  ChatResponse send(const ChatRequest& request) override {
    std::lock_guard lock(mu_);
    ++calls_;
    if (script_.keyed) {
      const std::string fp = request_fingerprint(request);
      auto it = script_.by_fingerprint.find(fp);
      if (it == script_.by_fingerprint.end()) {
        throw ConfigError("mock gateway: no scripted response for fingerprint " + fp);
      }
      return respond(it->second);
    }
    if (next_ >= script_.ordered.size()) {
      throw ConfigError("mock gateway: script exhausted after " + std::to_string(script_.ordered.size()) +
                        " responses");
    }
    const auto& e = script_.ordered[next_++];
    if (e.error == "transient") throw TransientError("mock gateway: scripted transient failure");
    if (e.error == "permanent") throw PermanentError("mock gateway: scripted permanent failure");
    return respond(e.response);
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

 private:
  static ChatResponse respond(const std::string& text) {
    ChatResponse r;
    r.text = text;
    r.metadata["transport"] = "mock";
    return r;
  }

  mutable std::mutex mu_;
  MockScript script_;
  std::size_t next_ = 0;
  std::size_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

class Gateway {
 public:
  Gateway(GatewayConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = real_sleep)
      : cfg_(std::move(cfg)), transport_(std::move(transport)), sleep_(std::move(sleeper)) {
    cfg_.validate();
    if (!transport_) throw ConfigError("gateway: no transport");
  }

  const GatewayConfig& config() const { return cfg_; }

  // At most 1 + max_retries attempts, backoff base * 2^k between them.
  ChatResponse complete(const ChatRequest& request) {
    request.validate();
    Slot slot(*this);
    std::string log;
    for (int attempt = 0;; ++attempt) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        ChatResponse r = transport_->send(request);
        r.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        r.metadata["attempts"] = std::to_string(attempt + 1);
        return r;
      } catch (const TransientError& e) {
        log += "attempt " + std::to_string(attempt + 1) + ": " + e.what() + "\n";
        if (attempt >= cfg_.max_retries) {
          throw TransientError("gateway: " + std::to_string(attempt + 1) + " attempts failed\n" + log);
        }
      }
      const double delay = cfg_.backoff_base_ms * static_cast<double>(1ULL << std::min(attempt, 20));
      sleep_(std::chrono::milliseconds(static_cast<long long>(delay)));
    }
  }

 private:
  class Slot {
   public:
    explicit Slot(Gateway& g) : g_(g) {
      std::unique_lock lock(g_.mu_);
      g_.cv_.wait(lock, [&] { return g_.in_flight_ < g_.cfg_.max_in_flight; });
      ++g_.in_flight_;
    }
    ~Slot() {
      {
        std::lock_guard lock(g_.mu_);
        --g_.in_flight_;
      }
      g_.cv_.notify_one();
    }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    Gateway& g_;
  };

  GatewayConfig cfg_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleep_;
  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
};

inline std::shared_ptr<Gateway> mock_gateway(MockScript script, GatewayConfig cfg = {}) {
  return std::make_shared<Gateway>(std::move(cfg), std::make_shared<MockTransport>(std::move(script)),
                                   [](std::chrono::milliseconds) {});
}

}  // namespace idvlm
