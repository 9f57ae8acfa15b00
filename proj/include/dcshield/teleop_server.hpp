#pragma once

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <utility>

#include "json.hpp"

#include "dcshield/teleop.hpp"

namespace dcshield::teleop {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

/// One WebSocket client. Sessions it creates belong to it and end with the connection.
class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(websocket::stream<beast::tcp_stream> ws, Service& service)
      : ws_(std::move(ws)), service_(service), timer_(ws_.get_executor()) {}

  void start(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, [self = shared_from_this()](beast::error_code ec) {
      if (!ec) self->read();
    });
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->on_message(text);
      self->read();
    });
  }

  void on_message(const std::string& text) {
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      send(error_message("malformed", e.what()));
      return;
    }
    const bool is_act = msg.is_object() && msg.value("type", "") == "act";
    if (is_act && msg.contains("session") && msg["session"].is_string() && !owned_.contains(msg["session"].get<std::string>())) {
      send(error_message("unknown-session", "session not owned by this connection", msg["session"].get<std::string>()));
      return;
    }
    for (auto& reply : service_.handle(msg)) dispatch(std::move(reply));
  }

  void dispatch(nlohmann::json reply) {
    const std::string type = reply.value("type", "");
    if (type == "created") {
      const std::string id = reply["session"];
      owned_.emplace(id, reply["mode"] == "ticked" ? reply["period_ms"].get<int>() : 0);
    } else if (type == "frame") {
      deadlines_.erase(reply["session"].get<std::string>());
    } else if (type == "terminated") {
      owned_.erase(reply["session"].get<std::string>());
    }
    send(std::move(reply));
    arm();
  }

  /// Earliest ticked deadline among owned sessions: each ticked session advances by itself
  /// once its period elapses without a request.
  void arm() {
    timer_.cancel();
    for (auto& [id, period] : owned_) {
      if (period <= 0) continue;
      auto it = deadlines_.find(id);
      if (it == deadlines_.end() || it->second < std::chrono::steady_clock::now())
        deadlines_[id] = std::chrono::steady_clock::now() + std::chrono::milliseconds(period);
    }
    std::erase_if(deadlines_, [&](const auto& kv) { return !owned_.contains(kv.first); });
    if (deadlines_.empty()) return;
    auto next = deadlines_.begin();
    for (auto it = deadlines_.begin(); it != deadlines_.end(); ++it)
      if (it->second < next->second) next = it;
    timer_.expires_at(next->second);
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->on_deadline();
    });
  }

  void on_deadline() {
    const auto now = std::chrono::steady_clock::now();
    std::vector<std::string> due;
    for (const auto& [id, at] : deadlines_)
      if (at <= now) due.push_back(id);
    for (const auto& id : due) {
      deadlines_.erase(id);
      for (auto& reply : service_.expire(id)) dispatch(std::move(reply));
    }
    arm();
  }

  void send(nlohmann::json msg) {
    queue_.push_back(msg.dump());
    if (queue_.size() == 1) write();
  }

  void write() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->write();
    });
  }

  void close() {
    timer_.cancel();
    for (const auto& [id, period] : owned_) service_.drop(id);
    owned_.clear();
  }

  websocket::stream<beast::tcp_stream> ws_;
  Service& service_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  std::map<std::string, int> owned_;  // session -> tick period (0 = turn-based)
  std::map<std::string, std::chrono::steady_clock::time_point> deadlines_;
  asio::steady_timer timer_;
};

/// Reads the first request of a TCP connection: a WebSocket upgrade or a plain HTTP GET.
class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, Service& service) : stream_(std::move(socket)), service_(service) {}

  void start() {
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, req_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (!ec) self->on_request();
    });
  }

 private:
  void on_request() {
    if (websocket::is_upgrade(req_)) {
      stream_.expires_never();
      std::make_shared<Connection>(websocket::stream<beast::tcp_stream>(std::move(stream_)), service_)
          ->start(std::move(req_));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>();
    res->version(req_.version());
    res->set(http::field::content_type, "application/json");
    res->set(http::field::access_control_allow_origin, "*");
    if (req_.method() == http::verb::get && req_.target() == "/api/listing") {
      res->result(http::status::ok);
      res->body() = service_.listing().dump();
    } else {
      res->result(http::status::not_found);
      res->body() = error_message("not-found", "only GET /api/listing and WebSocket upgrades are served").dump();
    }
    res->keep_alive(false);
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code, std::size_t) {
      beast::error_code ignored;
      self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
    });
  }

  beast::tcp_stream stream_;
  Service& service_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

/// WebSocket endpoint (any path) plus GET /api/listing on one port, served by a single thread.
class Server {
 public:
  Server(Service& service, const std::string& address, unsigned short port)
      : service_(service), acceptor_(ioc_, tcp::endpoint(asio::ip::make_address(address), port)) {}

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  void run() {
    accept();
    ioc_.run();
  }

  void start() {
    accept();
    thread_ = std::thread([this] { ioc_.run(); });
  }

  void stop() {
    ioc_.stop();
    if (thread_.joinable()) thread_.join();
  }

  ~Server() { stop(); }

 private:
  void accept() {
    acceptor_.async_accept(asio::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (!ec) std::make_shared<HttpSession>(std::move(socket), service_)->start();
      if (acceptor_.is_open()) accept();
    });
  }

  Service& service_;
  asio::io_context ioc_{1};
  tcp::acceptor acceptor_;
  std::thread thread_;
};

}  // namespace dcshield::teleop
