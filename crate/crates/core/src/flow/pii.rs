//! PII taxonomy: five categories, each with a fixed set of kinds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PiiCategory {
    DeviceIdentifier,
    UserIdentifier,
    ContactInformation,
    Location,
    Credential,
}

impl PiiCategory {
    pub const ALL: [PiiCategory; 5] = [
        PiiCategory::DeviceIdentifier,
        PiiCategory::UserIdentifier,
        PiiCategory::ContactInformation,
        PiiCategory::Location,
        PiiCategory::Credential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PiiCategory::DeviceIdentifier => "DeviceIdentifier",
            PiiCategory::UserIdentifier => "UserIdentifier",
            PiiCategory::ContactInformation => "ContactInformation",
            PiiCategory::Location => "Location",
            PiiCategory::Credential => "Credential",
        }
    }

    pub fn kinds(self) -> impl Iterator<Item = PiiType> {
        PiiType::ALL.into_iter().filter(move |t| t.category() == self)
    }
}

impl fmt::Display for PiiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PiiCategory::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown PII category `{s}`"))
    }
}

/// A PII kind. The category is implied by the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PiiType {
    #[serde(rename = "ICCID")]
    Iccid,
    #[serde(rename = "IMEI")]
    Imei,
    #[serde(rename = "IMSI")]
    Imsi,
    MacAddress,
    AndroidId,
    AdvertiserId,
    OsDeviceId,
    Name,
    Gender,
    DateOfBirth,
    EmailAddress,
    MailingAddress,
    RelationshipStatus,
    PhoneNumber,
    AddressBookEntry,
    GpsCoordinate,
    ZipCode,
    Username,
    Password,
}

impl PiiType {
    pub const ALL: [PiiType; 19] = [
        PiiType::Iccid,
        PiiType::Imei,
        PiiType::Imsi,
        PiiType::MacAddress,
        PiiType::AndroidId,
        PiiType::AdvertiserId,
        PiiType::OsDeviceId,
        PiiType::Name,
        PiiType::Gender,
        PiiType::DateOfBirth,
        PiiType::EmailAddress,
        PiiType::MailingAddress,
        PiiType::RelationshipStatus,
        PiiType::PhoneNumber,
        PiiType::AddressBookEntry,
        PiiType::GpsCoordinate,
        PiiType::ZipCode,
        PiiType::Username,
        PiiType::Password,
    ];

    pub fn category(self) -> PiiCategory {
        use PiiType::*;
        match self {
            Iccid | Imei | Imsi | MacAddress | AndroidId | AdvertiserId | OsDeviceId => {
                PiiCategory::DeviceIdentifier
            }
            Name | Gender | DateOfBirth | EmailAddress | MailingAddress | RelationshipStatus => {
                PiiCategory::UserIdentifier
            }
            PhoneNumber | AddressBookEntry => PiiCategory::ContactInformation,
            GpsCoordinate | ZipCode => PiiCategory::Location,
            Username | Password => PiiCategory::Credential,
        }
    }

    pub fn as_str(self) -> &'static str {
        use PiiType::*;
        match self {
            Iccid => "ICCID",
            Imei => "IMEI",
            Imsi => "IMSI",
            MacAddress => "MacAddress",
            AndroidId => "AndroidId",
            AdvertiserId => "AdvertiserId",
            OsDeviceId => "OsDeviceId",
            Name => "Name",
            Gender => "Gender",
            DateOfBirth => "DateOfBirth",
            EmailAddress => "EmailAddress",
            MailingAddress => "MailingAddress",
            RelationshipStatus => "RelationshipStatus",
            PhoneNumber => "PhoneNumber",
            AddressBookEntry => "AddressBookEntry",
            GpsCoordinate => "GpsCoordinate",
            ZipCode => "ZipCode",
            Username => "Username",
            Password => "Password",
        }
    }
}

impl fmt::Display for PiiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PiiType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown PII kind `{s}`"))
    }
}
