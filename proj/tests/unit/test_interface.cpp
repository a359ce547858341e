#include <doctest.h>

#include <cstring>
#include <random>

#include "support.hpp"
#include "vap/error.hpp"
#include "vap/eval.hpp"
#include "vap/protocol.hpp"
#include "vap/server.hpp"
#include "vap/stream.hpp"
#include "vap/synth.hpp"

using namespace vap;

namespace {

VapModel tiny_model(int context) {
  ModelConfig c = test::tiny_config(3, 8, 40, context);
  return VapModel(c, ProjectionConfig{}, FeatureConfig{}, FeatureNormalizer::identity(40), VapNet<float>(c, 21));
}

std::vector<std::int16_t> interleave(const std::vector<std::vector<std::int16_t>>& audio, std::size_t a, std::size_t b) {
  std::vector<std::int16_t> out;
  for (std::size_t i = a; i < b; ++i)
    for (const auto& ch : audio) out.push_back(ch[i]);
  return out;
}

std::vector<std::vector<std::int16_t>> session_audio(double seconds, std::uint64_t seed) {
  SynthesisParams p = CorpusSynthesisConfig::default_spontaneous();
  p.session_duration = seconds;
  p.seed = seed;
  return synthesize_session(p).audio;
}

}  // namespace

TEST_CASE("wire messages round-trip") {
  const std::vector<wire::Message> msgs = {
      wire::Hello{3, 16000, "ckpt-1"},
      wire::Audio{7, 2, {1, -2, 3, 32767, -32768, 0}},
      wire::Prediction{12, {0.1f, 0.2f, 0.3f}, {0.9f, 0.f, 1.f}, {{5, 0.5f}, {63, 0.25f}}},
      wire::Error{wire::ErrorCode::busy, "full"},
      wire::Bye{}};
  wire::Decoder d;
  for (const auto& m : msgs) {
    const std::string bytes = wire::encode(m);
    std::uint32_t len;
    std::memcpy(&len, bytes.data(), 4);
    CHECK(len == bytes.size() - 4);
    const auto back = wire::decode(static_cast<wire::MessageType>(bytes[4]),
                                   std::span<const char>(bytes.data() + 5, bytes.size() - 5));
    CHECK(back == m);
    // byte-at-a-time feeding must give the same message
    for (std::size_t i = 0; i + 1 < bytes.size(); ++i) {
      d.feed(bytes.data() + i, 1);
      CHECK_FALSE(d.next());
    }
    d.feed(bytes.data() + bytes.size() - 1, 1);
    const auto got = d.next();
    REQUIRE(got);
    CHECK(*got == m);
  }

  SUBCASE("several messages in one feed") {
    std::string all;
    for (const auto& m : msgs) all += wire::encode(m);
    wire::Decoder d2;
    d2.feed(all.data(), all.size());
    for (const auto& m : msgs) CHECK(d2.next().value() == m);
    CHECK_FALSE(d2.next());
  }
}

TEST_CASE("malformed wire input") {
  const std::string hello = wire::encode(wire::Hello{});
  SUBCASE("unknown type") {
    std::string b = hello;
    b[4] = 9;
    wire::Decoder d;
    d.feed(b.data(), b.size());
    CHECK_THROWS_AS(d.next(), ProtocolError);
  }
  SUBCASE("oversized length") {
    const std::uint32_t big = wire::kMaxMessageBytes + 1;
    std::string b(4, '\0');
    std::memcpy(b.data(), &big, 4);
    wire::Decoder d;
    d.feed(b.data(), b.size());
    CHECK_THROWS_AS(d.next(), ProtocolError);
  }
  SUBCASE("truncated body") {
    CHECK_THROWS_AS(wire::decode(wire::MessageType::hello, std::span<const char>(hello.data() + 5, 3)), ProtocolError);
  }
  SUBCASE("audio sample count disagrees with the payload") {
    const std::string a = wire::encode(wire::Audio{1, 4, {1, 2, 3}});
    CHECK_THROWS_AS(wire::decode(wire::MessageType::audio, std::span<const char>(a.data() + 5, a.size() - 5)),
                    ProtocolError);
  }
  SUBCASE("trailing bytes") {
    std::string b = wire::encode(wire::Bye{});
    b += 'x';
    CHECK_THROWS_AS(wire::decode(wire::MessageType::bye, std::span<const char>(b.data() + 5, 1)), ProtocolError);
  }
}

TEST_CASE("streaming matches whole-session prediction") {
  const int context = 120, hop = 25;
  const VapModel model = tiny_model(context);
  const auto audio = session_audio(8.0, 5);
  SessionPredictor sp(model, model.normalize(extract_features(audio, FeatureConfig{})), hop);
  const int frames = sp.frame_count();
  REQUIRE(frames == 400);

  for (int chunk : {320, 123, 1000}) {
    CAPTURE(chunk);
    StreamPredictor stream(model, hop);
    std::vector<StreamOutput> outs;
    for (std::size_t a = 0; a < audio[0].size(); a += chunk) {
      const auto part = interleave(audio, a, std::min(audio[0].size(), a + chunk));
      for (auto& o : stream.push(part)) outs.push_back(std::move(o));
    }
    REQUIRE(static_cast<int>(outs.size()) == frames);
    double worst = 0.0;
    for (int t = 0; t < frames; ++t) {
      CHECK(outs[t].frame == t);
      for (int k = 0; k < 3; ++k) {
        worst = std::max(worst, std::abs(outs[t].prediction.p_future[k] - sp.at(t).p_future[k]));
        worst = std::max(worst, std::abs(outs[t].prediction.p_now[k] - sp.at(t).p_now[k]));
      }
    }
    CHECK(worst < 1e-4);
  }

  StreamPredictor stream(model, hop);
  const std::vector<std::int16_t> odd(5, 0);
  CHECK_THROWS(stream.push(odd));
}

TEST_CASE("latency summary") {
  const auto s = summarize_latency({4.0, 1.0, 3.0, 2.0});
  CHECK(s.frames == 4);
  CHECK(s.mean_ms == doctest::Approx(2.5));
  CHECK(s.max_ms == 4.0);
  CHECK(s.p50_ms == 3.0);
  CHECK(summarize_latency({}).frames == 0);
}

TEST_CASE("server sessions") {
  const VapModel model = tiny_model(100);
  ServerConfig cfg;
  cfg.port = 0;
  cfg.max_sessions = 1;
  cfg.hop_frames = 25;
  Server server(model, cfg);
  const std::uint16_t port = server.start();
  REQUIRE(port != 0);

  SUBCASE("stream_audio reproduces offline predictions") {
    const auto audio = session_audio(4.0, 8);
    const StreamResult r = stream_audio("127.0.0.1", port, audio, 320);
    CHECK_FALSE(r.error);
    SessionPredictor sp(model, model.normalize(extract_features(audio, FeatureConfig{})), 25);
    REQUIRE(static_cast<int>(r.predictions.size()) == sp.frame_count());
    double worst = 0.0;
    for (int t = 0; t < sp.frame_count(); ++t) {
      const auto& p = r.predictions[t];
      CHECK(p.frame == static_cast<std::uint32_t>(t));
      CHECK(p.top_states.size() == static_cast<std::size_t>(wire::kTopStates));
      for (std::size_t i = 1; i < p.top_states.size(); ++i) CHECK(p.top_states[i - 1].second >= p.top_states[i].second);
      for (int k = 0; k < 3; ++k) worst = std::max(worst, std::abs(p.p_future[k] - sp.at(t).p_future[k]));
    }
    CHECK(worst < 1e-4);
    CHECK(server.latency().frames >= r.predictions.size());
  }

  SUBCASE("wrong speaker count") {
    Client c("127.0.0.1", port);
    c.send(wire::Hello{2, 16000, ""});
    const auto m = c.receive();
    REQUIRE(m);
    REQUIRE(std::holds_alternative<wire::Error>(*m));
    CHECK(std::get<wire::Error>(*m).code == wire::ErrorCode::unsupported);
  }

  SUBCASE("audio before hello") {
    Client c("127.0.0.1", port);
    c.send(wire::Audio{0, 1, {0, 0, 0}});
    const auto m = c.receive();
    REQUIRE(m);
    CHECK(std::get<wire::Error>(*m).code == wire::ErrorCode::protocol);
  }

  SUBCASE("sequence numbers must increase") {
    Client c("127.0.0.1", port);
    c.send(wire::Hello{});
    c.send(wire::Audio{5, 1, {0, 0, 0}});
    c.send(wire::Audio{5, 1, {0, 0, 0}});
    const auto m = c.receive();
    REQUIRE(m);
    CHECK(std::get<wire::Error>(*m).code == wire::ErrorCode::protocol);
  }

  SUBCASE("garbage bytes") {
    Client c("127.0.0.1", port);
    c.send_raw(std::string("\x02\x00\x00\x00\x63\x00", 6));
    const auto m = c.receive();
    REQUIRE(m);
    CHECK(std::get<wire::Error>(*m).code == wire::ErrorCode::protocol);
  }

  SUBCASE("busy when the session limit is reached") {
    Client first("127.0.0.1", port);
    first.send(wire::Hello{});
    // wait until the first connection is registered
    for (int i = 0; i < 200 && server.active_sessions() < 1; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
    REQUIRE(server.active_sessions() == 1);
    Client second("127.0.0.1", port);
    const auto m = second.receive();
    REQUIRE(m);
    CHECK(std::get<wire::Error>(*m).code == wire::ErrorCode::busy);
    first.send(wire::Bye{});
    const auto bye = first.receive();
    REQUIRE(bye);
    CHECK(std::holds_alternative<wire::Bye>(*bye));
  }

  server.stop();
  CHECK(server.active_sessions() == 0);
}
