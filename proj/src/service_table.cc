#include "appnet/service_table.h"

#include <set>
#include <sstream>

namespace appnet {

bool ServiceEntry::same_version(const ServiceEntry& o) const {
  return kind == o.kind && key == o.key && real == o.real && host == o.host &&
         app_id == o.app_id && tags == o.tags && name == o.name &&
         incarnation == o.incarnation && state == o.state && expose == o.expose;
}

namespace {

// Last-writer-wins order: incarnation, then owner host id.
bool wins(const ServiceEntry& incoming, const ServiceEntry& resident) {
  if (incoming.incarnation != resident.incarnation)
    return incoming.incarnation > resident.incarnation;
  return incoming.host > resident.host;
}

void encode_key(ByteWriter& w, const ServiceKey& k) {
  w.u32(k.vip.value());
  w.u16(k.port);
}

ServiceKey decode_key(ByteReader& r) {
  uint32_t vip = r.u32();
  uint16_t port = r.u16();
  if (vip == 0 || vip == 0xFFFFFFFF || port == 0)
    throw Error(Errc::DecodeError, "invalid service key");
  return ServiceKey{VirtualIp(vip), port};
}

void encode_host(ByteWriter& w, const HostId& h) { w.raw(h.bytes); }

HostId decode_host(ByteReader& r) {
  HostId h;
  auto b = r.raw(16);
  std::copy(b.begin(), b.end(), h.bytes.begin());
  return h;
}

}  // namespace

void encode_entry_id(ByteWriter& w, const EntryId& id) {
  w.u8(static_cast<uint8_t>(id.kind));
  encode_key(w, id.key);
  encode_host(w, id.host);
  w.str16(id.app.value);
}

EntryId decode_entry_id(ByteReader& r) {
  EntryId id;
  uint8_t kind = r.u8();
  if (kind > 1) throw Error(Errc::DecodeError, "unknown entry kind");
  id.kind = static_cast<EntryKind>(kind);
  id.key = decode_key(r);
  id.host = decode_host(r);
  id.app.value = r.str16();
  return id;
}

void encode_entry(ByteWriter& w, const ServiceEntry& e) {
  encode_entry_id(w, e.id());
  w.u32(e.real.host_ip.value);
  w.u16(e.real.port);
  w.u8(e.name ? 1 : 0);
  if (e.name) w.str16(*e.name);
  auto pairs = e.tags.pairs();
  w.u16(static_cast<uint16_t>(pairs.size()));
  for (const auto& p : pairs) w.str16(p);
  w.u64(e.incarnation);
  w.u8(static_cast<uint8_t>(e.state));
  w.u8(e.expose ? 1 : 0);
  if (e.expose) w.u16(e.expose->port);
}

ServiceEntry decode_entry(ByteReader& r) {
  ServiceEntry e;
  EntryId id = decode_entry_id(r);
  e.kind = id.kind;
  e.key = id.key;
  e.host = id.host;
  e.app_id = id.app;
  e.real.host_ip.value = r.u32();
  e.real.port = r.u16();
  if (r.u8()) e.name = r.str16();
  std::vector<std::string> pairs(r.u16());
  for (auto& p : pairs) p = r.str16();
  try {
    e.tags = normalize_tags(pairs);
  } catch (const Error& err) {
    throw Error(Errc::DecodeError, err.what());
  }
  e.incarnation = r.u64();
  uint8_t state = r.u8();
  if (state > 1) throw Error(Errc::DecodeError, "unknown entry state");
  e.state = static_cast<EntryState>(state);
  if (r.u8()) e.expose = ExposeRequest{r.u16()};
  return e;
}

ServiceTable::ServiceTable(HostId local, uint64_t tomb_ttl) : local_(local), tomb_ttl_(tomb_ttl) {}

MergeOutcome ServiceTable::insert_local(ServiceEntry entry) {
  entry.host = local_;
  entry.state = EntryState::Alive;
  auto it = entries_.find(entry.id());
  if (it != entries_.end()) {
    if (it->second.alive())
      throw Error(Errc::DuplicateAppBinding,
                  entry.app_id.value + " already holds " + entry.key.str());
    entry.incarnation = std::max(entry.incarnation, it->second.incarnation + 1);
    it->second = entry;
  } else {
    it = entries_.emplace(entry.id(), entry).first;
  }
  changed(it->second);
  return MergeOutcome::Applied;
}

MergeOutcome ServiceTable::merge_remote(const ServiceEntry& entry, uint64_t now) {
  auto it = entries_.find(entry.id());
  if (entry.host == local_) {
    // Remote claims about our own entries get our current state re-asserted.
    if (it == entries_.end()) {
      if (!entry.alive()) {
        ServiceEntry e = entry;
        e.stamp = now;
        entries_.emplace(e.id(), e);
        return MergeOutcome::Applied;
      }
      ServiceEntry e = entry;
      e.state = EntryState::Tombstone;
      e.incarnation = entry.incarnation + 1;
      e.stamp = now;
      it = entries_.emplace(e.id(), e).first;
      changed(it->second);
      return MergeOutcome::Refuted;
    }
    if (!wins(entry, it->second)) return MergeOutcome::Stale;
    it->second.incarnation = entry.incarnation + 1;
    it->second.stamp = now;
    changed(it->second);
    return MergeOutcome::Refuted;
  }
  if (it != entries_.end() && !wins(entry, it->second)) return MergeOutcome::Stale;
  ServiceEntry e = entry;
  e.stamp = now;
  if (it == entries_.end())
    it = entries_.emplace(e.id(), e).first;
  else
    it->second = e;
  changed(it->second);
  return MergeOutcome::Applied;
}

std::vector<ServiceEntry> ServiceTable::lookup(const ServiceKey& key) const {
  std::vector<ServiceEntry> out;
  EntryId lo{EntryKind::Service, key, HostId{}, AppId{}};
  for (auto it = entries_.lower_bound(lo);
       it != entries_.end() && it->first.kind == EntryKind::Service && it->first.key == key; ++it)
    if (it->second.alive()) out.push_back(it->second);
  return out;
}

std::optional<VirtualIp> ServiceTable::lookup_name(const std::string& name) const {
  std::set<VirtualIp> vips;
  for (const auto& [id, e] : entries_)
    if (e.kind == EntryKind::Service && e.alive() && e.name == name) vips.insert(e.key.vip);
  if (vips.empty()) return std::nullopt;
  if (vips.size() > 1)
    throw Error(Errc::AmbiguousName, "name '" + name + "' maps to more than one vip");
  return *vips.begin();
}

std::optional<std::string> ServiceTable::name_of(VirtualIp vip) const {
  for (const auto& [id, e] : entries_)
    if (e.kind == EntryKind::Service && e.alive() && e.key.vip == vip && e.name) return e.name;
  return std::nullopt;
}

size_t ServiceTable::tombstone_host(const HostId& host, uint64_t now) {
  size_t n = 0;
  for (auto& [id, e] : entries_) {
    if (e.host != host || !e.alive()) continue;
    e.state = EntryState::Tombstone;
    ++e.incarnation;
    e.stamp = now;
    changed(e);
    ++n;
  }
  return n;
}

size_t ServiceTable::tombstone_app(const AppId& app, uint64_t now) {
  size_t n = 0;
  for (auto& [id, e] : entries_) {
    if (e.app_id != app || e.host != local_ || !e.alive()) continue;
    e.state = EntryState::Tombstone;
    ++e.incarnation;
    e.stamp = now;
    changed(e);
    ++n;
  }
  return n;
}

bool ServiceTable::tombstone_entry(const EntryId& id, uint64_t now) {
  auto it = entries_.find(id);
  if (it == entries_.end() || !it->second.alive()) return false;
  it->second.state = EntryState::Tombstone;
  ++it->second.incarnation;
  it->second.stamp = now;
  changed(it->second);
  return true;
}

size_t ServiceTable::gc_tombstones(uint64_t now) {
  size_t n = 0;
  for (auto it = entries_.begin(); it != entries_.end();) {
    if (!it->second.alive() && now > it->second.stamp && now - it->second.stamp > tomb_ttl_) {
      it = entries_.erase(it);
      ++n;
    } else {
      ++it;
    }
  }
  return n;
}

const ServiceEntry* ServiceTable::find(const EntryId& id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

std::vector<ServiceEntry> ServiceTable::entries() const {
  std::vector<ServiceEntry> out;
  out.reserve(entries_.size());
  for (const auto& [id, e] : entries_) out.push_back(e);
  return out;
}

std::vector<ServiceEntry> ServiceTable::alive(EntryKind kind) const {
  std::vector<ServiceEntry> out;
  for (const auto& [id, e] : entries_)
    if (e.kind == kind && e.alive()) out.push_back(e);
  return out;
}

std::vector<DigestItem> ServiceTable::digest() const {
  std::vector<DigestItem> out;
  out.reserve(entries_.size());
  for (const auto& [id, e] : entries_) out.push_back({id, e.incarnation});
  return out;
}

std::vector<ServiceEntry> ServiceTable::newer_than(const std::vector<DigestItem>& digest) const {
  std::map<EntryId, uint64_t> theirs;
  for (const auto& d : digest) theirs[d.id] = d.incarnation;
  std::vector<ServiceEntry> out;
  for (const auto& [id, e] : entries_) {
    auto it = theirs.find(id);
    if (it == theirs.end() || it->second < e.incarnation) out.push_back(e);
  }
  return out;
}

std::string ServiceTable::dump() const {
  std::ostringstream os;
  for (const auto& [id, e] : entries_) {
    if (e.kind != EntryKind::Service) continue;
    os << e.key.str() << '\t' << e.real.str() << '\t' << e.host.hex() << '\t'
       << (e.alive() ? "alive" : "tombstone") << '\t' << e.incarnation << '\t'
       << e.name.value_or("-") << '\t' << e.tags.str() << '\n';
  }
  return os.str();
}

}  // namespace appnet
