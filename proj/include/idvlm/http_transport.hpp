#pragma once

#include <cstdlib>
#include <regex>
#include <string>

#include <httplib.h>

#include "idvlm/gateway.hpp"

// Chat-completions style JSON over HTTP.
//
// Request body:
//   {"model": str, "max_tokens": int, "temperature": real,
//    "messages": [{"role": "system", "content": str},
//                 {"role": "user", "content": [{"type": "text", "text": str} |
//                                              {"type": "image_url", "image_url": {"url": str}}, ...]}]}
// Response body:
//   {"choices": [{"message": {"content": str}, "finish_reason": str}], ...}
//
// A bearer token is read from the file named by IDVLM_CREDENTIALS when set.

namespace idvlm {

inline constexpr const char* kCredentialsEnv = "IDVLM_CREDENTIALS";

inline Json chat_request_body(const GatewayConfig& cfg, const ChatRequest& r) {
  Json content = Json::array();
  for (const auto& p : r.parts) {
    if (p.kind == ChatPart::Kind::kText) {
      content.push_back({{"type", "text"}, {"text", p.value}});
    } else {
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", p.value}}}});
    }
  }
  Json messages = Json::array();
  if (!r.system.empty()) messages.push_back({{"role", "system"}, {"content", r.system}});
  messages.push_back({{"role", "user"}, {"content", content}});
  return {{"model", cfg.model}, {"max_tokens", r.max_tokens}, {"temperature", r.temperature}, {"messages", messages}};
}

inline ChatResponse parse_chat_response_body(const std::string& body) {
  Json j;
  try {
    j = Json::parse(body);
  } catch (const Json::exception& e) {
    throw TransientError(std::string("http transport: response is not JSON: ") + e.what());
  }
  try {
    const auto& choice = j.at("choices").at(0);
    ChatResponse r;
    r.text = choice.at("message").at("content").get<std::string>();
    if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
      r.finish_reason = choice["finish_reason"].get<std::string>();
    }
    r.metadata["transport"] = "http";
    if (j.contains("model") && j["model"].is_string()) r.metadata["model"] = j["model"].get<std::string>();
    return r;
  } catch (const Json::exception& e) {
    throw PermanentError(std::string("http transport: unexpected response shape: ") + e.what());
  }
}

class HttpTransport : public Transport {
 public:
  explicit HttpTransport(GatewayConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, url)) {
      throw ConfigError("http transport: endpoint must look like http://host[:port]/path, got " + cfg_.endpoint);
    }
    base_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
    if (const char* cred = std::getenv(kCredentialsEnv); cred && *cred) {
      token_ = read_text_file(cred);
      while (!token_.empty() && (token_.back() == '\n' || token_.back() == '\r' || token_.back() == ' ')) {
        token_.pop_back();
      }
    }
  }

  ChatResponse send(const ChatRequest& request) override {
    httplib::Client client(base_);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    const auto res = client.Post(path_, headers, chat_request_body(cfg_, request).dump(), "application/json");
    if (!res) throw TransientError("http transport: " + httplib::to_string(res.error()));
    const int status = res->status;
    if (status == 408 || status == 429 || status >= 500) {
      throw TransientError("http transport: status " + std::to_string(status));
    }
    if (status < 200 || status >= 300) {
      throw PermanentError("http transport: status " + std::to_string(status) + ": " + res->body.substr(0, 200));
    }
    return parse_chat_response_body(res->body);
  }

 private:
  GatewayConfig cfg_;
  std::string base_;
  std::string path_;
  std::string token_;
};

// endpoint "mock:<script path>" selects the mock transport.
inline std::shared_ptr<Gateway> make_gateway(const GatewayConfig& cfg, Sleeper sleeper = real_sleep) {
  if (cfg.endpoint.rfind("mock:", 0) == 0) {
    return std::make_shared<Gateway>(cfg, std::make_shared<MockTransport>(MockScript::load(cfg.endpoint.substr(5))),
                                     [](std::chrono::milliseconds) {});
  }
  return std::make_shared<Gateway>(cfg, std::make_shared<HttpTransport>(cfg), std::move(sleeper));
}

}  // namespace idvlm
