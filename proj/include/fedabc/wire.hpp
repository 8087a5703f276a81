#pragma once

#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"

namespace fedabc {

// Protocol vocabulary between the central server and the sites. Only
// Register and DiscrepancyReply ever travel site -> server.

struct Register {
  int site_id = 0;
  int n_rows = 0;
  friend bool operator==(const Register&, const Register&) = default;
};

struct CandidateBatch {
  std::uint64_t round = 0;
  Matrix rows;
  friend bool operator==(const CandidateBatch& a, const CandidateBatch& b) {
    return a.round == b.round && a.rows.rows() == b.rows.rows() && a.rows.cols() == b.rows.cols() &&
           a.rows == b.rows;
  }
};

struct DiscrepancyReply {
  std::uint64_t round = 0;
  int site_id = 0;
  double phi = 0.0;
  friend bool operator==(const DiscrepancyReply&, const DiscrepancyReply&) = default;
};

struct AcceptNotice {
  std::uint64_t round = 0;
  bool accepted = false;
  friend bool operator==(const AcceptNotice&, const AcceptNotice&) = default;
};

struct SampleDelivery {
  Matrix rows;
  friend bool operator==(const SampleDelivery& a, const SampleDelivery& b) {
    return a.rows.rows() == b.rows.rows() && a.rows.cols() == b.rows.cols() && a.rows == b.rows;
  }
};

struct Shutdown {
  friend bool operator==(const Shutdown&, const Shutdown&) = default;
};

using WireMessage = std::variant<Register, CandidateBatch, DiscrepancyReply, AcceptNotice, SampleDelivery, Shutdown>;

inline std::string_view message_type(const WireMessage& m) {
  return std::visit(
      [](const auto& v) -> std::string_view {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Register>) return "Register";
        if constexpr (std::is_same_v<T, CandidateBatch>) return "CandidateBatch";
        if constexpr (std::is_same_v<T, DiscrepancyReply>) return "DiscrepancyReply";
        if constexpr (std::is_same_v<T, AcceptNotice>) return "AcceptNotice";
        if constexpr (std::is_same_v<T, SampleDelivery>) return "SampleDelivery";
        if constexpr (std::is_same_v<T, Shutdown>) return "Shutdown";
      },
      m);
}

inline bool carries_matrix(const WireMessage& m) {
  return std::holds_alternative<CandidateBatch>(m) || std::holds_alternative<SampleDelivery>(m);
}

namespace detail {

inline nlohmann::json matrix_payload(const Matrix& m) {
  return {{"shape", {m.rows(), m.cols()}}, {"data", to_json_value(m)}};
}

inline Matrix matrix_from_payload(const nlohmann::json& j) {
  const auto& shape = j.at("shape");
  const auto rows = shape.at(0).get<Eigen::Index>();
  const auto cols = shape.at(1).get<Eigen::Index>();
  Matrix m = matrix_from_json(j.at("data"), cols);
  if (m.rows() != rows || m.cols() != cols) throw DecodeError("matrix payload shape mismatch");
  return m;
}

}  // namespace detail

inline nlohmann::json to_json_value(const WireMessage& msg) {
  nlohmann::json j;
  j["type"] = message_type(msg);
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Register>) {
          j["site_id"] = v.site_id;
          j["n_rows"] = v.n_rows;
        } else if constexpr (std::is_same_v<T, CandidateBatch>) {
          j["round"] = v.round;
          j["rows"] = detail::matrix_payload(v.rows);
        } else if constexpr (std::is_same_v<T, DiscrepancyReply>) {
          j["round"] = v.round;
          j["site_id"] = v.site_id;
          j["phi"] = v.phi;
        } else if constexpr (std::is_same_v<T, AcceptNotice>) {
          j["round"] = v.round;
          j["accepted"] = v.accepted;
        } else if constexpr (std::is_same_v<T, SampleDelivery>) {
          j["rows"] = detail::matrix_payload(v.rows);
        }
      },
      msg);
  return j;
}

inline WireMessage message_from_json(const nlohmann::json& j) {
  try {
    const auto type = j.at("type").get<std::string>();
    if (type == "Register") return Register{j.at("site_id").get<int>(), j.at("n_rows").get<int>()};
    if (type == "CandidateBatch") {
      return CandidateBatch{j.at("round").get<std::uint64_t>(), detail::matrix_from_payload(j.at("rows"))};
    }
    if (type == "DiscrepancyReply") {
      if (!j.at("phi").is_number()) throw DecodeError("DiscrepancyReply phi is not a number");
      return DiscrepancyReply{j.at("round").get<std::uint64_t>(), j.at("site_id").get<int>(),
                              j.at("phi").get<double>()};
    }
    if (type == "AcceptNotice") return AcceptNotice{j.at("round").get<std::uint64_t>(), j.at("accepted").get<bool>()};
    if (type == "SampleDelivery") return SampleDelivery{detail::matrix_from_payload(j.at("rows"))};
    if (type == "Shutdown") return Shutdown{};
    throw DecodeError("unknown message type '" + type + "'");
  } catch (const nlohmann::json::exception& e) {
    throw DecodeError(std::string("malformed message: ") + e.what());
  } catch (const ShapeError& e) {
    throw DecodeError(std::string("malformed matrix payload: ") + e.what());
  }
}

inline constexpr std::uint32_t kMaxFrameBytes = 256u << 20;

/// 4-byte big-endian length prefix followed by the UTF-8 JSON body.
inline std::string encode_frame(const WireMessage& msg) {
  const std::string body = to_json_value(msg).dump();
  if (body.size() > kMaxFrameBytes) throw TransportError("message exceeds the frame size limit");
  const auto len = static_cast<std::uint32_t>(body.size());
  std::string out(4, '\0');
  out[0] = static_cast<char>((len >> 24) & 0xFF);
  out[1] = static_cast<char>((len >> 16) & 0xFF);
  out[2] = static_cast<char>((len >> 8) & 0xFF);
  out[3] = static_cast<char>(len & 0xFF);
  out += body;
  return out;
}

/// Body length announced by a frame header, or nullopt if fewer than 4 bytes.
inline std::optional<std::uint32_t> frame_length(std::span<const char> bytes) {
  if (bytes.size() < 4) return std::nullopt;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len = (len << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
  if (len > kMaxFrameBytes) throw DecodeError("frame length exceeds limit");
  return len;
}

/// Decodes exactly one complete frame; a truncated or oversized buffer is a
/// DecodeError.
inline WireMessage decode_frame(std::span<const char> bytes) {
  const auto len = frame_length(bytes);
  if (!len) throw DecodeError("truncated frame header");
  if (bytes.size() < 4 + static_cast<std::size_t>(*len)) throw DecodeError("truncated frame body");
  if (bytes.size() > 4 + static_cast<std::size_t>(*len)) throw DecodeError("trailing bytes after frame");
  const std::string_view body(bytes.data() + 4, *len);
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw DecodeError("frame body is not valid JSON");
  return message_from_json(j);
}

}  // namespace fedabc
