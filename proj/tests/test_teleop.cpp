#include <gtest/gtest.h>

#include <boost/asio/connect.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "dcshield/teleop_server.hpp"

using namespace dcshield;
using namespace dcshield::teleop;

namespace {

/// Two transient states, goal 2, unsafe 3; a0 is the idle action.
std::shared_ptr<const envs::EnvBundle> toy_env() {
  MdpBuilder b(4, 2);
  b.add(0, 0, 1, 0.5).add(0, 0, 0, 0.3).add(0, 0, 2, 0.2);
  b.add(0, 1, 2, 0.6).add(0, 1, 3, 0.4);
  b.add(1, 0, 3, 0.5).add(1, 0, 0, 0.5);
  b.add(1, 1, 2, 0.7).add(1, 1, 1, 0.3);
  for (ActionId a = 0; a < 2; ++a) b.add(2, a, 2, 1.0).add(3, a, 3, 1.0);
  b.init(0, 1.0);
  std::vector<StateId> unsafe{3};
  std::vector<StateId> goal{2};
  b.label("unsafe", unsafe).label("goal", goal);
  auto e = std::make_shared<envs::EnvBundle>();
  e->name = "toy";
  e->mdp = std::move(b).build();
  e->spec = SpecKind::reach_avoid;
  e->safe_action = 0;
  e->metric.action_count = 2;
  e->metric.d = {0, 1, 1, 0};
  e->controller = Policy(e->mdp, {0, 1, 0, 0});
  e->action_names = {"a0", "a1"};
  e->horizon = 200;
  e->separation = [](StateId s) { return static_cast<double>(s); };
  e->describe = [](StateId s) { return nlohmann::json{{"s", s}}; };
  return e;
}

struct Fixture {
  std::shared_ptr<const envs::EnvBundle> env = toy_env();
  std::shared_ptr<const DcMdp> dc = std::make_shared<const DcMdp>(DcMdp::random_delay(env->mdp, DelayModel::reference(2)));

  std::shared_ptr<const Shield> shield(SynthesisMode mode = SynthesisMode::policy_free) const {
    const auto an = analyze(*dc, make_objective(*dc, env->spec));
    SynthesisOptions opt;
    opt.mode = mode;
    opt.delta = an.expected_vmax;
    const auto lifted = lift_policy(*dc, env->controller);
    auto res = mode == SynthesisMode::policy_free ? synthesize(*dc, an, opt) : synthesize(*dc, an, opt, lifted);
    res.shield.meta.digest = model_digest(*dc);
    return std::make_shared<const Shield>(std::move(res.shield));
  }

  void fill(Service& s) const { s.add(make_entry("toy-rand", env, dc, shield())); }
};

nlohmann::json msg(nlohmann::json body) {
  body["v"] = 1;
  return body;
}

}  // namespace

TEST(Protocol, ListingDescribesTheCatalog) {
  Fixture f;
  Service svc;
  f.fill(svc);
  const auto out = svc.handle(msg({{"type", "list"}}));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0]["type"], "listing");
  ASSERT_EQ(out[0]["shields"].size(), 1u);
  EXPECT_EQ(out[0]["shields"][0]["id"], "toy-rand");
  EXPECT_EQ(out[0]["shields"][0]["tau_max"], 2);
  EXPECT_EQ(out[0]["shields"][0]["delay_kind"], "random");
  EXPECT_EQ(out[0]["envs"]["toy"]["spec"], "reach-avoid");
}

TEST(Protocol, ErrorsCarryCodes) {
  Fixture f;
  Service svc;
  f.fill(svc);
  EXPECT_EQ(svc.handle({{"type", "list"}})[0]["code"], "version");
  EXPECT_EQ(svc.handle(msg({{"type", "fly"}}))[0]["code"], "unknown-type");
  EXPECT_EQ(svc.handle(nlohmann::json::array())[0]["code"], "malformed");
  EXPECT_EQ(svc.handle(msg({{"type", "create"}, {"shield", "nope"}}))[0]["code"], "unknown-shield");
  EXPECT_EQ(svc.handle(msg({{"type", "create"}, {"shield", "toy-rand"}, {"mode", "fast"}}))[0]["code"], "malformed");
  EXPECT_EQ(svc.handle(msg({{"type", "act"}, {"action", 0}}))[0]["code"], "malformed");
  EXPECT_EQ(svc.handle(msg({{"type", "act"}, {"session", "s99"}, {"action", 0}}))[0]["code"], "unknown-session");
  const auto created = svc.handle(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", 3}}))[0];
  const auto sid = created["session"];
  const auto bad = svc.handle(msg({{"type", "act"}, {"session", sid}, {"action", 7}}))[0];
  EXPECT_EQ(bad["code"], "bad-action");
  EXPECT_EQ(bad["session"], sid);
  EXPECT_EQ(svc.handle(msg({{"type", "act"}, {"session", sid}, {"action", "up"}}))[0]["code"], "malformed");
}

TEST(Protocol, FramesShowOnlyTheDelayedView) {
  Fixture f;
  Service svc;
  f.fill(svc);
  const auto created = svc.handle(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", 11}}))[0];
  EXPECT_EQ(created["type"], "created");
  EXPECT_EQ(created["seed"], 11);
  EXPECT_EQ(created["digest"], model_digest(*f.dc));
  const auto& frame = created["frame"];
  for (const char* key : {"tick", "observed", "delay", "buffer", "allowed", "q_max", "status"})
    EXPECT_TRUE(frame.contains(key)) << key;
  EXPECT_FALSE(frame.contains("true_state"));
  EXPECT_EQ(frame["tick"], 0);
  EXPECT_EQ(frame["buffer"].size(), 2u);
  EXPECT_EQ(frame["q_max"].size(), 2u);
  EXPECT_TRUE(frame["requested"].is_null());
}

TEST(Protocol, TranscriptReplaysFromSeedAndRequests) {
  Fixture f;
  Service svc;
  f.fill(svc);
  const auto created = svc.handle(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", 5}}))[0];
  const std::string sid = created["session"];
  std::vector<ActionId> requests;
  nlohmann::json terminated;
  for (int i = 0; i < 1000 && terminated.is_null(); ++i) {
    const ActionId a = i % 3 == 0 ? 1 : 0;
    requests.push_back(a);
    for (const auto& reply : svc.handle(msg({{"type", "act"}, {"session", sid}, {"action", a}}))) {
      if (reply["type"] == "terminated") terminated = reply;
      else EXPECT_EQ(reply["type"], "frame");
    }
  }
  ASSERT_FALSE(terminated.is_null());
  EXPECT_EQ(terminated["transcript"].size(), requests.size());
  EXPECT_EQ(svc.finished().size(), 1u);
  EXPECT_EQ(svc.handle(msg({{"type", "act"}, {"session", sid}, {"action", 0}}))[0]["code"], "unknown-session");

  // Offline replay with the same seed and the same requests reproduces every record.
  const auto sh = f.shield();
  EpisodeRunner replay(*f.env, *f.dc, sh.get(), Fallback::nearest, terminated["seed"].get<std::uint64_t>());
  replay.keep_records(true);
  replay.set_horizon(f.env->horizon);
  for (ActionId a : requests) replay.step(a);
  EXPECT_TRUE(replay.done());
  EXPECT_EQ(to_string(replay.outcome()), terminated["outcome"].get<std::string>());
  for (std::size_t i = 0; i < requests.size(); ++i) EXPECT_EQ(to_json(replay.records()[i]), terminated["transcript"][i]);
}

TEST(Protocol, DisallowedRequestIsOverriddenInTheFrame) {
  Fixture f;
  Service svc;
  f.fill(svc);
  int overrides = 0;
  for (std::uint64_t seed = 0; seed < 50 && overrides == 0; ++seed) {
    auto reply = svc.handle(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", seed}}))[0];
    const std::string sid = reply["session"];
    nlohmann::json frame = reply["frame"];
    while (frame["status"] == "live") {
      std::vector<int> allowed = frame["allowed"];
      // Request something outside the allowed set whenever there is such an action.
      ActionId req = 0;
      if (allowed.size() == 1) req = allowed[0] == 0 ? 1 : 0;
      const auto out = svc.handle(msg({{"type", "act"}, {"session", sid}, {"action", req}}));
      frame = out[0];
      ASSERT_EQ(frame["type"], "frame");
      const bool was_allowed = std::find(allowed.begin(), allowed.end(), req) != allowed.end();
      EXPECT_EQ(frame["overridden"].get<bool>(), !was_allowed);
      if (!was_allowed) {
        ++overrides;
        EXPECT_NE(frame["executed"], req);
        EXPECT_TRUE(std::find(allowed.begin(), allowed.end(), frame["executed"].get<int>()) != allowed.end());
      }
    }
  }
  EXPECT_GT(overrides, 0);
}

TEST(Catalog, RejectsControllerSpecificAndMismatchedShields) {
  Fixture f;
  EXPECT_THROW(make_entry("x", f.env, f.dc, f.shield(SynthesisMode::with_policy)), ProtocolError);
  auto other = std::make_shared<const DcMdp>(DcMdp::random_delay(f.env->mdp, DelayModel::reference(1)));
  EXPECT_THROW(make_entry("y", f.env, other, f.shield()), ModelMismatchError);
  Service svc;
  svc.add(make_entry("a", f.env, f.dc, f.shield()));
  EXPECT_THROW(svc.add(make_entry("a", f.env, f.dc, f.shield())), std::invalid_argument);
}

namespace {

namespace asio = boost::asio;
namespace beast = boost::beast;

struct Client {
  asio::io_context ioc;
  beast::websocket::stream<asio::ip::tcp::socket> ws{ioc};

  explicit Client(unsigned short port) {
    asio::ip::tcp::resolver resolver(ioc);
    asio::connect(ws.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws.handshake("127.0.0.1", "/");
  }

  void send(const nlohmann::json& j) { ws.write(asio::buffer(j.dump())); }

  nlohmann::json receive() {
    beast::flat_buffer buf;
    ws.read(buf);
    return nlohmann::json::parse(beast::buffers_to_string(buf.data()));
  }
};

}  // namespace

TEST(Server, WebSocketRoundTrip) {
  Fixture f;
  Service svc;
  f.fill(svc);
  Server server(svc, "127.0.0.1", 0);
  server.start();
  Client c(server.port());
  c.send(msg({{"type", "list"}}));
  EXPECT_EQ(c.receive()["type"], "listing");
  c.send(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", 2}}));
  const auto created = c.receive();
  ASSERT_EQ(created["type"], "created");
  c.send(msg({{"type", "act"}, {"session", created["session"]}, {"action", 1}}));
  const auto frame = c.receive();
  EXPECT_EQ(frame["type"], "frame");
  EXPECT_EQ(frame["session"], created["session"]);
  EXPECT_EQ(frame["requested"], 1);
  if (frame["status"] != "live") {
    EXPECT_EQ(c.receive()["type"], "terminated");
  }
  c.ws.write(asio::buffer(std::string("not json")));
  EXPECT_EQ(c.receive()["code"], "malformed");
  c.ws.close(beast::websocket::close_code::normal);
  server.stop();
}

TEST(Server, SessionsBelongToTheirConnection) {
  Fixture f;
  Service svc;
  f.fill(svc);
  Server server(svc, "127.0.0.1", 0);
  server.start();
  Client a(server.port());
  Client b(server.port());
  a.send(msg({{"type", "create"}, {"shield", "toy-rand"}, {"seed", 2}}));
  const auto created = a.receive();
  b.send(msg({{"type", "act"}, {"session", created["session"]}, {"action", 0}}));
  EXPECT_EQ(b.receive()["code"], "unknown-session");
  server.stop();
}

TEST(Server, TickedSessionAdvancesWithTheIdleAction) {
  Fixture f;
  Service svc;
  f.fill(svc);
  Server server(svc, "127.0.0.1", 0);
  server.start();
  Client c(server.port());
  c.send(msg({{"type", "create"}, {"shield", "toy-rand"}, {"mode", "ticked"}, {"period_ms", 30}, {"seed", 4}}));
  const auto created = c.receive();
  ASSERT_EQ(created["type"], "created");
  EXPECT_EQ(created["mode"], "ticked");
  if (created["frame"]["status"] == "live") {
    const auto frame = c.receive();  // no request sent: the deadline fires
    EXPECT_EQ(frame["type"], "frame");
    EXPECT_EQ(frame["requested"], f.env->safe_action);
    EXPECT_EQ(frame["tick"], 1);
  }
  server.stop();
}

TEST(Server, HttpListingEndpoint) {
  Fixture f;
  Service svc;
  f.fill(svc);
  Server server(svc, "127.0.0.1", 0);
  server.start();
  asio::io_context ioc;
  beast::tcp_stream stream(ioc);
  asio::ip::tcp::resolver resolver(ioc);
  stream.connect(resolver.resolve("127.0.0.1", std::to_string(server.port())));
  beast::http::request<beast::http::empty_body> req{beast::http::verb::get, "/api/listing", 11};
  req.set(beast::http::field::host, "127.0.0.1");
  beast::http::write(stream, req);
  beast::flat_buffer buf;
  beast::http::response<beast::http::string_body> res;
  beast::http::read(stream, buf, res);
  EXPECT_EQ(res.result(), beast::http::status::ok);
  EXPECT_EQ(nlohmann::json::parse(res.body())["type"], "listing");
  server.stop();
}
