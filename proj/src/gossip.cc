#include "appnet/gossip.h"

#include <algorithm>
#include <cmath>

namespace appnet {

std::string_view member_status_name(MemberStatus s) {
  switch (s) {
    case MemberStatus::Alive: return "alive";
    case MemberStatus::Suspect: return "suspect";
    case MemberStatus::Dead: return "dead";
  }
  return "?";
}

std::string_view envelope_kind_name(EnvelopeKind k) {
  switch (k) {
    case EnvelopeKind::Ping: return "Ping";
    case EnvelopeKind::PingReq: return "PingReq";
    case EnvelopeKind::Ack: return "Ack";
    case EnvelopeKind::Sync: return "Sync";
    case EnvelopeKind::SyncReply: return "SyncReply";
  }
  return "?";
}

// --- wire -----------------------------------------------------------------

namespace {

constexpr uint32_t kAbsentSection = 0xFFFFFFFF;

void encode_member(ByteWriter& w, const MemberRecord& m) {
  w.raw(m.host.bytes);
  w.u32(m.addr.host_ip.value);
  w.u16(m.addr.port);
  w.u8(static_cast<uint8_t>(m.status));
  w.u64(m.incarnation);
  w.u8(m.gateway ? 1 : 0);
}

MemberRecord decode_member(ByteReader& r) {
  MemberRecord m;
  auto h = r.raw(16);
  std::copy(h.begin(), h.end(), m.host.bytes.begin());
  m.addr.host_ip.value = r.u32();
  m.addr.port = r.u16();
  uint8_t st = r.u8();
  if (st > 2) throw Error(Errc::DecodeError, "unknown member status");
  m.status = static_cast<MemberStatus>(st);
  m.incarnation = r.u64();
  m.gateway = r.u8() != 0;
  return m;
}

template <typename T, typename Fn>
void encode_section(ByteWriter& w, const std::vector<T>& items, Fn&& enc) {
  size_t at = w.size();
  w.u32(0);
  for (const auto& item : items) {
    ByteWriter one;
    enc(one, item);
    if (one.size() > UINT16_MAX) throw Error(Errc::MessageTooLong, "gossip item too large");
    w.u16(static_cast<uint16_t>(one.size()));
    w.raw(one.bytes());
  }
  w.patch_u32(at, static_cast<uint32_t>(w.size() - at - 4));
}

template <typename T, typename Fn>
std::optional<std::vector<T>> decode_section(ByteReader& r, Fn&& dec) {
  uint32_t len = r.u32();
  if (len == kAbsentSection) return std::nullopt;
  ByteReader section(r.raw(len));
  std::vector<T> out;
  while (!section.done()) {
    ByteReader item(section.raw(section.u16()));
    out.push_back(dec(item));
    if (!item.done()) throw Error(Errc::DecodeError, "trailing bytes in gossip item");
  }
  return out;
}

void encode_digest_item(ByteWriter& w, const DigestItem& d) {
  encode_entry_id(w, d.id);
  w.u64(d.incarnation);
}

DigestItem decode_digest_item(ByteReader& r) {
  DigestItem d;
  d.id = decode_entry_id(r);
  d.incarnation = r.u64();
  return d;
}

int precedence(MemberStatus s) { return static_cast<int>(s); }

}  // namespace

namespace {

Bytes encode_unchecked(const GossipEnvelope& env) {
  ByteWriter w;
  w.u8(kGossipVersion);
  w.u8(static_cast<uint8_t>(env.kind));
  w.raw(env.sender.bytes);
  w.u32(env.seq);
  w.raw(env.subject.bytes);
  encode_section(w, env.rumors, encode_member);
  encode_section(w, env.deltas, encode_entry);
  if (env.digest)
    encode_section(w, *env.digest, encode_digest_item);
  else
    w.u32(kAbsentSection);
  return w.take();
}

}  // namespace

Bytes encode_envelope(const GossipEnvelope& env) {
  Bytes out = encode_unchecked(env);
  if (out.size() > kMaxEnvelopeBytes)
    throw Error(Errc::MessageTooLong, "envelope of " + std::to_string(out.size()) + " bytes");
  return out;
}

GossipEnvelope decode_envelope(std::span<const uint8_t> bytes) {
  if (bytes.size() > kMaxEnvelopeBytes) throw Error(Errc::DecodeError, "envelope too large");
  ByteReader r(bytes);
  if (r.u8() != kGossipVersion) throw Error(Errc::DecodeError, "unsupported gossip version");
  GossipEnvelope env;
  uint8_t kind = r.u8();
  if (kind < 1 || kind > 5) throw Error(Errc::DecodeError, "unknown envelope kind");
  env.kind = static_cast<EnvelopeKind>(kind);
  auto s = r.raw(16);
  std::copy(s.begin(), s.end(), env.sender.bytes.begin());
  env.seq = r.u32();
  auto subj = r.raw(16);
  std::copy(subj.begin(), subj.end(), env.subject.bytes.begin());
  env.rumors = decode_section<MemberRecord>(r, decode_member).value_or(std::vector<MemberRecord>{});
  env.deltas = decode_section<ServiceEntry>(r, decode_entry).value_or(std::vector<ServiceEntry>{});
  env.digest = decode_section<DigestItem>(r, decode_digest_item);
  if (!r.done()) throw Error(Errc::DecodeError, "trailing bytes after envelope");
  return env;
}

// --- protocol -------------------------------------------------------------

Gossip::Gossip(MemberRecord self, ServiceTable& table, GossipConfig cfg)
    : self_(self), table_(table), cfg_(cfg) {
  self_.status = MemberStatus::Alive;
}

void Gossip::join(RealEndpoint peer) {
  join_peer_ = peer;
  join_state_ = JoinState::Joining;
  join_tries_ = 0;
  next_join_round_ = 0;
}

const MemberRecord* Gossip::member(const HostId& h) const {
  if (h == self_.host) return &self_;
  auto it = members_.find(h);
  return it == members_.end() ? nullptr : &it->second;
}

std::vector<HostId> Gossip::alive_members() const {
  std::vector<HostId> out;
  for (const auto& [h, m] : members_)
    if (m.status == MemberStatus::Alive) out.push_back(h);
  return out;
}

std::vector<HostId> Gossip::alive_gateways() const {
  std::vector<HostId> out;
  if (self_.gateway) out.push_back(self_.host);
  for (const auto& [h, m] : members_)
    if (m.gateway && m.status != MemberStatus::Dead) out.push_back(h);
  std::sort(out.begin(), out.end());
  return out;
}

uint32_t Gossip::retransmit_limit() const {
  size_t n = 1;
  for (const auto& [h, m] : members_)
    if (m.status != MemberStatus::Dead) ++n;
  return static_cast<uint32_t>(std::ceil(cfg_.lambda * std::log2(static_cast<double>(n + 1))));
}

void Gossip::enqueue_member(const MemberRecord& m) { member_rumors_[m.host] = {m, 0}; }

void Gossip::enqueue_delta(const ServiceEntry& e) { delta_rumors_[e.id()] = {e, 0}; }

MemberRecord Gossip::refute(uint64_t observed_incarnation) {
  self_.incarnation = std::max(self_.incarnation, observed_incarnation) + 1;
  self_.status = MemberStatus::Alive;
  enqueue_member(self_);
  return self_;
}

bool Gossip::apply_member(const MemberRecord& m, uint64_t now, GossipResult& res) {
  if (m.host == self_.host) {
    if (m.status != MemberStatus::Alive && m.incarnation >= self_.incarnation)
      res.changes.push_back(refute(m.incarnation));
    else if (m.incarnation > self_.incarnation)
      res.changes.push_back(refute(m.incarnation));
    return false;
  }
  auto it = members_.find(m.host);
  if (it != members_.end()) {
    const MemberRecord& r = it->second;
    bool newer = m.incarnation > r.incarnation ||
                 (m.incarnation == r.incarnation && precedence(m.status) > precedence(r.status));
    if (!newer) return false;
  }
  const bool was_dead = it != members_.end() && it->second.status == MemberStatus::Dead;
  MemberRecord rec = m;
  rec.last_change = now;
  members_[m.host] = rec;
  enqueue_member(rec);
  res.changes.push_back(rec);
  if (rec.status == MemberStatus::Dead) {
    probes_.erase(rec.host);
    if (!was_dead) table_.tombstone_host(rec.host, now);
  }
  return true;
}

void Gossip::mark(const HostId& h, MemberStatus status, uint64_t now, GossipResult* res) {
  auto it = members_.find(h);
  if (it == members_.end() || precedence(it->second.status) >= precedence(status)) return;
  it->second.status = status;
  it->second.last_change = now;
  enqueue_member(it->second);
  if (res) res->changes.push_back(it->second);
  if (status == MemberStatus::Dead) {
    probes_.erase(h);
    table_.tombstone_host(h, now);
  }
}

std::vector<HostId> Gossip::suspect_timeout_sweep(uint64_t now) {
  std::vector<HostId> dead;
  for (auto& [h, m] : members_) {
    if (m.status == MemberStatus::Suspect && now >= m.last_change + cfg_.suspect_periods)
      dead.push_back(h);
  }
  for (const auto& h : dead) mark(h, MemberStatus::Dead, now, nullptr);
  return dead;
}

GossipEnvelope Gossip::make(EnvelopeKind kind) {
  GossipEnvelope env;
  env.kind = kind;
  env.sender = self_.host;
  return env;
}

void Gossip::piggyback(GossipEnvelope& env) {
  const uint32_t limit = retransmit_limit();
  auto take = [&](auto& rumors, auto& out) {
    using Iter = decltype(rumors.begin());
    std::vector<Iter> order;
    for (auto it = rumors.begin(); it != rumors.end(); ++it) order.push_back(it);
    std::stable_sort(order.begin(), order.end(),
                     [](Iter a, Iter b) { return a->second.sent < b->second.sent; });
    size_t n = std::min<size_t>(order.size(), cfg_.piggyback);
    for (size_t i = 0; i < n; ++i) {
      out.push_back(order[i]->second.item);
      if (++order[i]->second.sent >= limit) rumors.erase(order[i]);
    }
  };
  take(member_rumors_, env.rumors);
  take(delta_rumors_, env.deltas);
}

std::vector<MemberRecord> Gossip::full_membership() const {
  std::vector<MemberRecord> out;
  out.push_back(self_);
  for (const auto& [h, m] : members_) out.push_back(m);
  return out;
}

GossipEnvelope Gossip::sync_envelope(EnvelopeKind kind, const std::vector<ServiceEntry>& deltas,
                                     bool with_digest) const {
  GossipEnvelope env;
  env.kind = kind;
  env.sender = self_.host;
  env.rumors = full_membership();
  env.deltas = deltas;
  if (with_digest) env.digest = table_.digest();
  // Anything cut here goes out with a later exchange.
  while (encode_unchecked(env).size() > kMaxEnvelopeBytes) {
    if (!env.deltas.empty())
      env.deltas.resize(env.deltas.size() * 9 / 10);
    else if (env.digest && !env.digest->empty())
      env.digest->resize(env.digest->size() * 9 / 10);
    else
      env.rumors.resize(env.rumors.size() * 9 / 10);
  }
  return env;
}

GossipEnvelope Gossip::anti_entropy(const HostId&) const {
  return sync_envelope(EnvelopeKind::Sync, {}, true);
}

Outgoing Gossip::to_member(const HostId& h, GossipEnvelope env, bool reliable) const {
  Outgoing o;
  o.to = h;
  if (auto* m = member(h)) o.addr = m->addr;
  o.env = std::move(env);
  o.reliable = reliable;
  return o;
}

std::vector<Outgoing> Gossip::tick(uint64_t round, Rng& rng) {
  std::vector<Outgoing> out;

  if (join_state_ == JoinState::Joining && round >= next_join_round_) {
    if (join_tries_ < cfg_.join_attempts) {
      Outgoing o;
      o.addr = *join_peer_;
      o.env = sync_envelope(EnvelopeKind::Sync, {}, true);
      o.reliable = true;
      out.push_back(std::move(o));
      next_join_round_ = round + (uint64_t{1} << (join_tries_ + 1));
      ++join_tries_;
    } else {
      join_state_ = JoinState::Failed;
    }
  }

  suspect_timeout_sweep(round);

  // Outstanding probes: escalate to indirect, then suspect.
  std::vector<HostId> expired;
  for (auto& [target, probe] : probes_) {
    if (round <= probe.sent) continue;
    if (!probe.indirect) {
      std::vector<HostId> helpers;
      for (const auto& [h, m] : members_)
        if (h != target && m.status == MemberStatus::Alive) helpers.push_back(h);
      for (size_t i = 0; i < helpers.size() && i < cfg_.k_indirect; ++i) {
        size_t j = i + rng.below(helpers.size() - i);
        std::swap(helpers[i], helpers[j]);
        GossipEnvelope env = make(EnvelopeKind::PingReq);
        env.seq = probe.seq;
        env.subject = target;
        piggyback(env);
        out.push_back(to_member(helpers[i], std::move(env)));
      }
      probe.indirect = true;
      probe.sent = round;
    } else {
      expired.push_back(target);
    }
  }
  for (const auto& h : expired) {
    probes_.erase(h);
    mark(h, MemberStatus::Suspect, round, nullptr);
  }

  // Next probe target, round-robin over a shuffled member list.
  std::optional<HostId> target;
  for (int pass = 0; pass < 2 && !target; ++pass) {
    while (probe_index_ < probe_order_.size()) {
      const HostId& h = probe_order_[probe_index_++];
      auto it = members_.find(h);
      if (it != members_.end() && probeable(it->second) && !probes_.count(h)) {
        target = h;
        break;
      }
    }
    if (!target) {
      probe_order_.clear();
      for (const auto& [h, m] : members_)
        if (probeable(m)) probe_order_.push_back(h);
      for (size_t i = probe_order_.size(); i > 1; --i)
        std::swap(probe_order_[i - 1], probe_order_[rng.below(i)]);
      probe_index_ = 0;
    }
  }
  if (target) {
    GossipEnvelope env = make(EnvelopeKind::Ping);
    env.seq = next_seq_++;
    const MemberRecord& tm = members_.at(*target);
    if (tm.status == MemberStatus::Suspect) {
      // Tell the suspect directly.
      env.rumors.push_back(tm);
      member_rumors_.erase(*target);
    }
    piggyback(env);
    probes_[*target] = Probe{round, false, env.seq};
    out.push_back(to_member(*target, std::move(env)));
  }

  if (cfg_.anti_entropy_every && round > 0 && round % cfg_.anti_entropy_every == 0) {
    auto alive = alive_members();
    if (!alive.empty()) {
      const HostId& peer = alive[rng.below(alive.size())];
      out.push_back(to_member(peer, anti_entropy(peer), true));
    }
    // Dead members are retried too.
    std::vector<HostId> dead;
    for (const auto& [h, m] : members_)
      if (m.status == MemberStatus::Dead) dead.push_back(h);
    if (!dead.empty()) {
      const HostId& peer = dead[rng.below(dead.size())];
      out.push_back(to_member(peer, anti_entropy(peer), true));
    }
  }
  return out;
}

GossipResult Gossip::handle_envelope(const GossipEnvelope& env, RealEndpoint from, uint64_t now) {
  GossipResult res;
  if (env.sender == self_.host) return res;

  const bool sync = env.kind == EnvelopeKind::Sync || env.kind == EnvelopeKind::SyncReply;
  if (!sync && !members_.count(env.sender)) {
    MemberRecord m;
    m.host = env.sender;
    m.addr = from;
    apply_member(m, now, res);
  }
  for (const auto& m : env.rumors) apply_member(m, now, res);
  for (const auto& d : env.deltas) table_.merge_remote(d, now);

  auto reply_to = [&](GossipEnvelope e, bool reliable) {
    Outgoing o = to_member(env.sender, std::move(e), reliable);
    if (!member(env.sender)) o.addr = from;
    res.out.push_back(std::move(o));
  };

  switch (env.kind) {
    case EnvelopeKind::Ping: {
      GossipEnvelope ack = make(EnvelopeKind::Ack);
      ack.seq = env.seq;
      piggyback(ack);
      reply_to(std::move(ack), false);
      break;
    }
    case EnvelopeKind::PingReq: {
      if (!members_.count(env.subject)) break;
      uint32_t seq = next_seq_++;
      relays_[seq] = IndirectRelay{env.sender, env.seq, env.subject};
      GossipEnvelope ping = make(EnvelopeKind::Ping);
      ping.seq = seq;
      piggyback(ping);
      res.out.push_back(to_member(env.subject, std::move(ping)));
      break;
    }
    case EnvelopeKind::Ack: {
      auto relay = relays_.find(env.seq);
      if (relay != relays_.end() && relay->second.target == env.sender) {
        GossipEnvelope fwd = make(EnvelopeKind::Ack);
        fwd.seq = relay->second.origin_seq;
        fwd.subject = env.sender;
        res.out.push_back(to_member(relay->second.origin, std::move(fwd)));
        relays_.erase(relay);
        break;
      }
      const HostId target = env.subject.is_zero() ? env.sender : env.subject;
      auto p = probes_.find(target);
      if (p != probes_.end() && p->second.seq == env.seq) probes_.erase(p);
      break;
    }
    case EnvelopeKind::Sync: {
      auto deltas = env.digest ? table_.newer_than(*env.digest) : table_.entries();
      reply_to(sync_envelope(EnvelopeKind::SyncReply, deltas, true), true);
      break;
    }
    case EnvelopeKind::SyncReply: {
      if (join_state_ == JoinState::Joining) join_state_ = JoinState::Joined;
      if (env.digest) {
        GossipEnvelope back = sync_envelope(EnvelopeKind::SyncReply, table_.newer_than(*env.digest),
                                            false);
        reply_to(std::move(back), true);
      }
      break;
    }
  }
  return res;
}

}  // namespace appnet
